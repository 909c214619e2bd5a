// Transformation groups acting on generative latents: rotation (unit
// quaternions), color (hue angle + saturation), crop (center + scale) and
// blur (scalar strength). Every transformation is encoded into one
// fixed-width Action vector so a single token width serves all groups.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxssl/error.hpp"
#include "ctxssl/rng.hpp"

namespace ctxssl {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

enum class GroupId : std::uint8_t { Rotation = 0, Color = 1, Crop = 2, Blur = 3 };

inline constexpr std::array<GroupId, 4> kAllGroups = {
    GroupId::Rotation, GroupId::Color, GroupId::Crop, GroupId::Blur};

inline std::string_view group_name(GroupId g) {
  switch (g) {
    case GroupId::Rotation: return "rotation";
    case GroupId::Color: return "color";
    case GroupId::Crop: return "crop";
    case GroupId::Blur: return "blur";
  }
  return "?";
}

inline GroupId parse_group(std::string_view s) {
  for (GroupId g : kAllGroups)
    if (group_name(g) == s) return g;
  throw Error(ErrorKind::Config, "unknown group '" + std::string(s) + "'");
}

/// Slot range [offset, offset + width) of a group inside the action vector.
struct SlotRange {
  std::size_t offset;
  std::size_t width;
};

inline constexpr std::size_t kActionDim = 11;

inline constexpr SlotRange action_slots(GroupId g) {
  switch (g) {
    case GroupId::Rotation: return {0, 4};
    case GroupId::Color: return {4, 2};
    case GroupId::Crop: return {6, 4};
    case GroupId::Blur: return {10, 1};
  }
  return {0, 0};
}

// ---------------------------------------------------------------------------
// Quaternion

/// Unit quaternion, canonicalized to w >= 0 so each rotation has exactly one
/// representative.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  static Quaternion identity() { return {}; }

  /// Normalizes and canonicalizes. Throws on a zero-norm input.
  static Quaternion make(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    if (!(n > 0.0) || !std::isfinite(n))
      throw Error(ErrorKind::Domain, "quaternion with zero or non-finite norm");
    Quaternion q{w / n, x / n, y / n, z / n};
    if (q.w < 0.0) q = {-q.w, -q.x, -q.y, -q.z};
    return q;
  }

  static Quaternion from_axis_angle(double ax, double ay, double az, double angle) {
    const double n = std::sqrt(ax * ax + ay * ay + az * az);
    if (!(n > 0.0)) throw Error(ErrorKind::Domain, "zero rotation axis");
    const double s = std::sin(angle / 2.0) / n;
    return make(std::cos(angle / 2.0), ax * s, ay * s, az * s);
  }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  /// Rotation angle in [0, pi].
  double angle() const { return 2.0 * std::acos(std::min(1.0, std::abs(w))); }

  std::array<double, 4> as_array() const { return {w, x, y, z}; }

  friend bool operator==(const Quaternion&, const Quaternion&) = default;
};

using Mat3 = std::array<double, 9>;  // row-major
using Vec3 = std::array<double, 3>;

/// Hamilton product a * b (apply b first, then a).
inline Quaternion quat_mul(const Quaternion& a, const Quaternion& b) {
  return Quaternion::make(a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
                          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
                          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
                          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w);
}

inline Quaternion quat_inverse(const Quaternion& q) {
  return Quaternion::make(q.w, -q.x, -q.y, -q.z);
}

inline Mat3 quat_to_matrix(const Quaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

/// Shepperd's method: branch on the largest diagonal term for stability.
inline Quaternion matrix_to_quat(const Mat3& m) {
  const double tr = m[0] + m[4] + m[8];
  if (tr > 0.0) {
    const double s = 2.0 * std::sqrt(tr + 1.0);
    return Quaternion::make(0.25 * s, (m[7] - m[5]) / s, (m[2] - m[6]) / s,
                            (m[3] - m[1]) / s);
  }
  if (m[0] > m[4] && m[0] > m[8]) {
    const double s = 2.0 * std::sqrt(1.0 + m[0] - m[4] - m[8]);
    return Quaternion::make((m[7] - m[5]) / s, 0.25 * s, (m[1] + m[3]) / s,
                            (m[2] + m[6]) / s);
  }
  if (m[4] > m[8]) {
    const double s = 2.0 * std::sqrt(1.0 + m[4] - m[0] - m[8]);
    return Quaternion::make((m[2] - m[6]) / s, (m[1] + m[3]) / s, 0.25 * s,
                            (m[5] + m[7]) / s);
  }
  const double s = 2.0 * std::sqrt(1.0 + m[8] - m[0] - m[4]);
  return Quaternion::make((m[3] - m[1]) / s, (m[2] + m[6]) / s, (m[5] + m[7]) / s,
                          0.25 * s);
}

inline Vec3 rotate(const Quaternion& q, const Vec3& v) {
  const Mat3 m = quat_to_matrix(q);
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

/// Uniform rotation (Shoemake's subgroup algorithm).
inline Quaternion sample_uniform_quaternion(Rng& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double r1 = std::sqrt(1.0 - u1), r2 = std::sqrt(u1);
  const double t1 = kTwoPi * u2, t2 = kTwoPi * u3;
  return Quaternion::make(r2 * std::cos(t2), r1 * std::sin(t1), r1 * std::cos(t1),
                          r2 * std::sin(t2));
}

// ---------------------------------------------------------------------------
// Scalar groups

/// Wraps an angle into [0, 2pi).
inline double wrap_angle_positive(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  if (r >= kTwoPi) r = 0.0;
  return r;
}

/// Wraps an angle difference into (-pi, pi].
inline double wrap_angle_delta(double a) {
  double r = std::remainder(a, kTwoPi);  // [-pi, pi]
  if (r <= -std::numbers::pi) r += kTwoPi;
  return r;
}

struct ColorParams {
  double theta = 0.0;  // hue angle in [0, 2pi)
  double phi = 0.5;    // saturation-like scalar in [0, 1]
  friend bool operator==(const ColorParams&, const ColorParams&) = default;
};

struct CropParams {
  double cx = 0.0, cy = 0.0;  // center offsets in [-1, 1]
  double sw = 1.0, sh = 1.0;  // scale factors in (0, 1]
  friend bool operator==(const CropParams&, const CropParams&) = default;
};

inline constexpr double kBlurSigmaMax = 1.5;

struct BlurParams {
  double sigma = 0.0;  // in [0, kBlurSigmaMax]
  friend bool operator==(const BlurParams&, const BlurParams&) = default;
};

inline ColorParams make_color(double theta, double phi) {
  require(std::isfinite(theta), ErrorKind::Domain, "color theta is not finite");
  require(phi >= 0.0 && phi <= 1.0, ErrorKind::Domain, "color phi outside [0,1]");
  return {wrap_angle_positive(theta), phi};
}

inline CropParams make_crop(double cx, double cy, double sw, double sh) {
  require(cx >= -1.0 && cx <= 1.0 && cy >= -1.0 && cy <= 1.0, ErrorKind::Domain,
          "crop center outside [-1,1]");
  require(sw > 0.0 && sw <= 1.0 && sh > 0.0 && sh <= 1.0, ErrorKind::Domain,
          "crop scale outside (0,1]");
  return {cx, cy, sw, sh};
}

inline BlurParams make_blur(double sigma) {
  require(sigma >= 0.0 && sigma <= kBlurSigmaMax, ErrorKind::Domain,
          "blur sigma outside [0, sigma_max]");
  return {sigma};
}

// ---------------------------------------------------------------------------
// Action

/// Fixed-width transformation parameters, layout
/// [rotation: 4 | color: 2 | crop: 4 | blur: 1]. Slots outside the active
/// group are exactly zero; an action without active group is all zero.
class Action {
 public:
  Action() { values_.fill(0.0); }

  static Action none() { return {}; }

  /// Builds an action for `g` from exactly `width(g)` parameters.
  static Action of(GroupId g, std::span<const double> params) {
    const SlotRange r = action_slots(g);
    require(params.size() == r.width, ErrorKind::Shape, "action parameter width mismatch");
    Action a;
    a.active_ = g;
    for (std::size_t i = 0; i < r.width; ++i) a.values_[r.offset + i] = params[i];
    return a;
  }

  const std::array<double, kActionDim>& values() const { return values_; }
  std::optional<GroupId> active_group() const { return active_; }

  std::span<const double> slots(GroupId g) const {
    const SlotRange r = action_slots(g);
    return std::span<const double>(values_).subspan(r.offset, r.width);
  }

  friend bool operator==(const Action&, const Action&) = default;

 private:
  std::array<double, kActionDim> values_;
  std::optional<GroupId> active_;
};

// ---------------------------------------------------------------------------
// Latent state

struct LatentState {
  int object_id = 0;
  int class_id = 0;
  Quaternion pose;
  ColorParams color;
  CropParams crop;
  BlurParams blur;
  friend bool operator==(const LatentState&, const LatentState&) = default;
};

/// How the rotation slot of a relative action is formed. `Compose` yields the
/// group element q_y * q_x^-1; `Subtract` is the raw component difference.
enum class RotationRelative { Compose, Subtract };

inline Action relative_action(const LatentState& x, const LatentState& y, GroupId g,
                              RotationRelative mode = RotationRelative::Compose) {
  require(x.object_id == y.object_id, ErrorKind::Domain,
          "relative_action on views of different objects");
  switch (g) {
    case GroupId::Rotation: {
      if (mode == RotationRelative::Compose) {
        const auto q = quat_mul(y.pose, quat_inverse(x.pose)).as_array();
        return Action::of(g, q);
      }
      const std::array<double, 4> d = {y.pose.w - x.pose.w, y.pose.x - x.pose.x,
                                       y.pose.y - x.pose.y, y.pose.z - x.pose.z};
      return Action::of(g, d);
    }
    case GroupId::Color: {
      const std::array<double, 2> d = {wrap_angle_delta(y.color.theta - x.color.theta),
                                       y.color.phi - x.color.phi};
      return Action::of(g, d);
    }
    case GroupId::Crop: {
      const std::array<double, 4> d = {y.crop.cx - x.crop.cx, y.crop.cy - x.crop.cy,
                                       y.crop.sw - x.crop.sw, y.crop.sh - x.crop.sh};
      return Action::of(g, d);
    }
    case GroupId::Blur: {
      const std::array<double, 1> d = {y.blur.sigma - x.blur.sigma};
      return Action::of(g, d);
    }
  }
  throw Error(ErrorKind::Domain, "unknown group");
}

/// Applies `a` to `x`. Only the active group's fields change; results outside
/// the latent domain throw instead of clamping so relative_action stays an
/// exact inverse.
inline LatentState apply_action(const LatentState& x, const Action& a,
                                RotationRelative mode = RotationRelative::Compose) {
  LatentState y = x;
  if (!a.active_group()) return y;
  const auto s = a.slots(*a.active_group());
  switch (*a.active_group()) {
    case GroupId::Rotation:
      if (mode == RotationRelative::Compose) {
        y.pose = quat_mul(Quaternion::make(s[0], s[1], s[2], s[3]), x.pose);
      } else {
        y.pose = Quaternion::make(x.pose.w + s[0], x.pose.x + s[1], x.pose.y + s[2],
                                  x.pose.z + s[3]);
      }
      break;
    case GroupId::Color:
      y.color = make_color(x.color.theta + s[0], x.color.phi + s[1]);
      break;
    case GroupId::Crop:
      y.crop = make_crop(x.crop.cx + s[0], x.crop.cy + s[1], x.crop.sw + s[2],
                         x.crop.sh + s[3]);
      break;
    case GroupId::Blur:
      y.blur = make_blur(x.blur.sigma + s[0]);
      break;
  }
  return y;
}

/// Half-widths of the uniform delta distributions for the scalar groups.
inline constexpr double kPhiDelta = 0.3;
inline constexpr double kCropDelta = 0.2;
inline constexpr double kBlurDelta = 0.3;

inline Action sample_action(GroupId g, Rng& rng) {
  switch (g) {
    case GroupId::Rotation:
      return Action::of(g, sample_uniform_quaternion(rng).as_array());
    case GroupId::Color: {
      const double theta = wrap_angle_delta(rng.uniform(0.0, kTwoPi));
      const std::array<double, 2> d = {theta, rng.uniform(-kPhiDelta, kPhiDelta)};
      return Action::of(g, d);
    }
    case GroupId::Crop: {
      std::array<double, 4> d;
      for (double& v : d) v = rng.uniform(-kCropDelta, kCropDelta);
      return Action::of(g, d);
    }
    case GroupId::Blur: {
      const std::array<double, 1> d = {rng.uniform(-kBlurDelta, kBlurDelta)};
      return Action::of(g, d);
    }
  }
  throw Error(ErrorKind::Domain, "unknown group");
}

/// Latent ranges for freshly sampled (untransformed) views. They sit inside
/// the domain by at least one delta half-width, so applying any sampled
/// action keeps the result in-domain.
inline LatentState sample_base_latent(int object_id, int class_id, Rng& rng) {
  LatentState s;
  s.object_id = object_id;
  s.class_id = class_id;
  s.pose = sample_uniform_quaternion(rng);
  s.color.theta = rng.uniform(0.0, kTwoPi);
  s.color.phi = rng.uniform(kPhiDelta, 1.0 - kPhiDelta);
  s.crop.cx = rng.uniform(-1.0 + kCropDelta, 1.0 - kCropDelta);
  s.crop.cy = rng.uniform(-1.0 + kCropDelta, 1.0 - kCropDelta);
  s.crop.sw = rng.uniform(0.4, 1.0 - kCropDelta);
  s.crop.sh = rng.uniform(0.4, 1.0 - kCropDelta);
  s.blur.sigma = rng.uniform(kBlurDelta, kBlurSigmaMax - kBlurDelta);
  return s;
}

// ---------------------------------------------------------------------------
// Latent feature vectors

/// Width of a group's latent features: rotation as a flattened rotation
/// matrix (continuous, no double cover), color as (cos theta, sin theta, phi)
/// (continuous across the hue wrap), crop and blur as their raw parameters.
inline constexpr std::size_t latent_feature_width(GroupId g) {
  switch (g) {
    case GroupId::Rotation: return 9;
    case GroupId::Color: return 3;
    case GroupId::Crop: return 4;
    case GroupId::Blur: return 1;
  }
  return 0;
}

inline void append_latent_features(const LatentState& s, GroupId g, std::vector<double>& out) {
  switch (g) {
    case GroupId::Rotation: {
      const Mat3 m = quat_to_matrix(s.pose);
      out.insert(out.end(), m.begin(), m.end());
      break;
    }
    case GroupId::Color:
      out.push_back(std::cos(s.color.theta));
      out.push_back(std::sin(s.color.theta));
      out.push_back(s.color.phi);
      break;
    case GroupId::Crop:
      out.insert(out.end(), {s.crop.cx, s.crop.cy, s.crop.sw, s.crop.sh});
      break;
    case GroupId::Blur:
      out.push_back(s.blur.sigma);
      break;
  }
}

}  // namespace ctxssl
