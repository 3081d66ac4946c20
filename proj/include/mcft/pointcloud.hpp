#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mcft/common.hpp"
#include "mcft/shapes.hpp"
#include "mcft/tensor.hpp"

namespace mcft {

/// An unordered set of 3D points with an optional class label.
struct PointCloud {
  Tensor points;  // [M,3]
  std::optional<int> label;
  std::string id;

  int size() const { return points.numel() ? points.dim(0) : 0; }
};

/// FPS centers plus center-relative KNN groups.
struct PatchSet {
  Tensor centers;  // [m,3]
  Tensor groups;   // [m,k,3], stored relative to the group's center
  std::string source_id;

  int num_patches() const { return centers.numel() ? centers.dim(0) : 0; }
  int group_size() const { return groups.rank() == 3 ? groups.dim(1) : 0; }
};

struct SyntheticSpec {
  std::vector<std::string> class_catalog = shapes::family_names();
  int points_per_cloud = 256;
  double noise_sigma = 0.0;
  uint64_t seed = 0;
};

/// C * samples_per_class clouds on analytic surfaces plus isotropic Gaussian
/// noise; labels follow catalog order; deterministic in spec.seed.
std::vector<PointCloud> generate_dataset(const SyntheticSpec& spec,
                                         int samples_per_class,
                                         const std::string& id_prefix = "");

/// Zero-centroid, max-norm-1 scaling. A degenerate all-identical cloud maps
/// to all zeros.
PointCloud normalize_cloud(const PointCloud& cloud);

/// Greedy farthest point sampling. First pick is start_index; every later
/// pick maximizes the minimum distance to the picked set; ties go to the
/// lowest index. Returns indices in pick order.
std::vector<int> farthest_point_sample(const PointCloud& cloud, int m, int start_index);

/// For each center index, the k nearest cloud points (center itself included
/// at distance 0; ties to the lowest index), stored center-relative.
PatchSet knn_group(const PointCloud& cloud, const std::vector<int>& center_indices, int k);

enum class AugmentStrength { weak, strong };

/// Fully describes one augmentation draw; tests can build these directly to
/// force e.g. a zero rotation.
struct AugmentParams {
  double rotation_angle = 0.0;  // about the vertical (z) axis
  double jitter_sigma = 0.0;
  double jitter_clip = 0.02;
  uint64_t jitter_seed = 0;
  double scale[3] = {1.0, 1.0, 1.0};
  double drop_ratio = 0.0;
  uint64_t drop_seed = 0;
  double translation[3] = {0.0, 0.0, 0.0};
  /// Second dropout stage used by the hard-augmentation curriculum.
  double extra_drop_ratio = 0.0;
  uint64_t extra_drop_seed = 0;
};

AugmentParams sample_augment_params(AugmentStrength strength, uint64_t seed);
PointCloud apply_augment(const PointCloud& cloud, const AugmentParams& params);

/// weak: random z-rotation + clipped Gaussian jitter. strong: weak plus
/// per-axis anisotropic scale, random dropout (>= 8 survivors) and a random
/// translation. Pure function of (cloud, strength, seed).
PointCloud augment(const PointCloud& cloud, AugmentStrength strength, uint64_t seed);

}  // namespace mcft
