#include <gtest/gtest.h>

#include "ctxssl/config.hpp"

using namespace ctxssl;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::Io;
}

}  // namespace

TEST(Config, DefaultsResolve) {
  const RunConfig rc = resolve_config(json(), {});
  EXPECT_EQ(json(rc), default_config_json());
  EXPECT_EQ(rc.ablate.p_grid, (std::vector<double>{0.0, 0.2, 0.5, 0.75, 0.9, 0.98}));
}

TEST(Config, FileValuesOverlayDefaults) {
  const json file = {{"train", {{"steps", 42}, {"lr", 1}}}, {"world", {{"seed", 9}}}};
  const RunConfig rc = resolve_config(file, {});
  EXPECT_EQ(rc.train.steps, 42);
  EXPECT_EQ(rc.train.lr, 1.0);
  EXPECT_EQ(rc.world.seed, 9u);
  EXPECT_EQ(rc.model.out_dim, RunConfig{}.model.out_dim);
}

TEST(Config, FlagsOverrideFileInOrder) {
  const json file = {{"train", {{"steps", 42}}}};
  const RunConfig rc = resolve_config(file, {{"train.steps", "7"}, {"steps", "8"}, {"p", "0.25"}});
  EXPECT_EQ(rc.train.steps, 8);
  EXPECT_EQ(rc.train.mask.p, 0.25);
}

TEST(Config, AliasesMapToKeys) {
  const RunConfig rc = resolve_config(json(), {{"lambda", "0"},
                                               {"world-seed", "5"},
                                               {"out", "somewhere"},
                                               {"resume", "true"},
                                               {"lengths", "0,2,14"}});
  EXPECT_EQ(rc.train.loss.lambda, 0.0);
  EXPECT_EQ(rc.world.seed, 5u);
  EXPECT_EQ(rc.paths.out_dir, "somewhere");
  EXPECT_TRUE(rc.paths.resume);
  EXPECT_EQ(rc.probe.lengths, (std::vector<int>{0, 2, 14}));
}

TEST(Config, ListsParse) {
  const RunConfig rc = resolve_config(json(), {{"ablate.p_grid", "0,0.5,0.9"}, {"active-groups", "rotation"}});
  EXPECT_EQ(rc.ablate.p_grid, (std::vector<double>{0.0, 0.5, 0.9}));
  EXPECT_EQ(rc.world.active_groups, (std::vector<GroupId>{GroupId::Rotation}));
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_EQ(kind_of([] { resolve_config(json{{"train", {{"stepz", 1}}}}, {}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json{{"extra", 1}}, {}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"train.nope", "1"}}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"nope", "1"}}); }), ErrorKind::Config);
}

TEST(Config, WrongTypesAreRejected) {
  EXPECT_EQ(kind_of([] { resolve_config(json{{"train", {{"steps", "ten"}}}}, {}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json{{"train", 3}}, {}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"steps", "ten"}}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"resume", "maybe"}}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"groups", "rotation,scale"}}); }), ErrorKind::Config);
}

TEST(Config, ValuesAreValidated) {
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"p", "1.5"}}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"ablate.p_grid", "0,2"}}); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([] { resolve_config(json(), {{"lambda", "-1"}}); }), ErrorKind::Config);
}

TEST(Config, HashTracksContent) {
  const json a = resolve_config(json(), {});
  const json b = resolve_config(json(), {{"steps", "11"}});
  EXPECT_EQ(config_hash(a), config_hash(json(resolve_config(json(), {}))));
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, JsonRoundTrip) {
  const RunConfig rc = resolve_config(json(), {{"steps", "11"}, {"lengths", "0,4"}});
  EXPECT_EQ(json(json(rc).get<RunConfig>()), json(rc));
}
