#pragma once

#include <array>
#include <string>
#include <vector>

#include "mcft/common.hpp"

namespace mcft {
namespace shapes {

using Vec3 = std::array<double, 3>;

/// The synthetic class catalog. Every family is an analytic surface so that
/// zero-noise samples can be validated by an exact distance-to-surface check.
enum class Family {
  sphere,
  cube,
  cylinder,
  cone,
  torus,
  pyramid,
  ellipsoid,
  helix,
};

const std::vector<std::string>& family_names();
Family family_from_name(const std::string& name);  // throws config_error

/// Draws one point exactly on the family's canonical surface.
Vec3 sample_surface(Family f, Rng& rng);

/// Euclidean distance from p to the canonical surface (exact up to solver
/// tolerance ~1e-9 for ellipsoid/helix, closed-form for the rest).
double surface_distance(Family f, const Vec3& p);

}  // namespace shapes
}  // namespace mcft
