#include "mcft/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "mcft/kernels.hpp"

namespace mcft {

std::vector<PointCloud> generate_dataset(const SyntheticSpec& spec,
                                         int samples_per_class,
                                         const std::string& id_prefix) {
  if (samples_per_class < 1)
    throw validation_error("samples_per_class must be >= 1");
  if (spec.class_catalog.empty())
    throw config_error("class catalog is empty");
  if (spec.points_per_cloud < 1)
    throw config_error("points_per_cloud must be >= 1");
  {
    std::set<std::string> uniq(spec.class_catalog.begin(), spec.class_catalog.end());
    if (uniq.size() != spec.class_catalog.size())
      throw config_error("class catalog contains duplicate names");
  }
  std::vector<shapes::Family> fams;
  for (const auto& name : spec.class_catalog) fams.push_back(shapes::family_from_name(name));

  const int C = static_cast<int>(fams.size());
  const int M = spec.points_per_cloud;
  std::vector<PointCloud> out(static_cast<size_t>(C) * samples_per_class);
  // One RNG stream per sample so generation order (and parallelism) cannot
  // change the data.
#pragma omp parallel for schedule(static) collapse(2)
  for (int ci = 0; ci < C; ++ci) {
    for (int si = 0; si < samples_per_class; ++si) {
      Rng rng(mix_seed({spec.seed, static_cast<uint64_t>(ci), static_cast<uint64_t>(si)}));
      PointCloud pc;
      pc.points = Tensor({M, 3});
      for (int i = 0; i < M; ++i) {
        shapes::Vec3 p = shapes::sample_surface(fams[ci], rng);
        for (int c = 0; c < 3; ++c) {
          double v = p[c];
          if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
          pc.points.at(i, c) = v;
        }
      }
      pc.label = ci;
      pc.id = id_prefix + spec.class_catalog[ci] + "_" + std::to_string(si);
      out[static_cast<size_t>(ci) * samples_per_class + si] = std::move(pc);
    }
  }
  return out;
}

PointCloud normalize_cloud(const PointCloud& cloud) {
  const int M = cloud.size();
  if (M < 1) throw validation_error("normalize_cloud: empty cloud");
  if (!cloud.points.all_finite())
    throw validation_error("normalize_cloud: non-finite coordinate");
  PointCloud out = cloud;
  double cx = 0.0, cy = 0.0, cz = 0.0;
  for (int i = 0; i < M; ++i) {
    cx += cloud.points.at(i, 0);
    cy += cloud.points.at(i, 1);
    cz += cloud.points.at(i, 2);
  }
  cx /= M;
  cy /= M;
  cz /= M;
  double maxn = 0.0;
  for (int i = 0; i < M; ++i) {
    const double x = cloud.points.at(i, 0) - cx;
    const double y = cloud.points.at(i, 1) - cy;
    const double z = cloud.points.at(i, 2) - cz;
    maxn = std::max(maxn, std::sqrt(x * x + y * y + z * z));
  }
  const double inv = maxn < 1e-12 ? 0.0 : 1.0 / maxn;
  for (int i = 0; i < M; ++i) {
    out.points.at(i, 0) = (cloud.points.at(i, 0) - cx) * inv;
    out.points.at(i, 1) = (cloud.points.at(i, 1) - cy) * inv;
    out.points.at(i, 2) = (cloud.points.at(i, 2) - cz) * inv;
  }
  return out;
}

std::vector<int> farthest_point_sample(const PointCloud& cloud, int m, int start_index) {
  const int M = cloud.size();
  if (m < 1 || m > M) throw validation_error("farthest_point_sample: need 1 <= m <= M");
  if (start_index < 0 || start_index >= M)
    throw validation_error("farthest_point_sample: start_index out of range");
  std::vector<int> picks;
  picks.reserve(m);
  picks.push_back(start_index);
  std::vector<double> dist(M, 1e300);
  const double* pts = cloud.points.data();
  double last[3] = {pts[3 * start_index], pts[3 * start_index + 1], pts[3 * start_index + 2]};
  for (int it = 1; it < m; ++it) {
    kernels::min_sqdist_update(pts, M, last, dist.data());
    int best = -1;
    double bd = -1.0;
    for (int i = 0; i < M; ++i) {
      if (dist[i] > bd) {  // strict: first (lowest) index wins ties
        bd = dist[i];
        best = i;
      }
    }
    picks.push_back(best);
    last[0] = pts[3 * best];
    last[1] = pts[3 * best + 1];
    last[2] = pts[3 * best + 2];
  }
  return picks;
}

PatchSet knn_group(const PointCloud& cloud, const std::vector<int>& center_indices, int k) {
  const int M = cloud.size();
  if (k < 1 || k > M) throw validation_error("knn_group: need 1 <= k <= M");
  {
    std::set<int> uniq(center_indices.begin(), center_indices.end());
    if (uniq.size() != center_indices.size())
      throw validation_error("knn_group: duplicate center indices");
  }
  for (int ci : center_indices)
    if (ci < 0 || ci >= M) throw validation_error("knn_group: center index out of range");
  const int m = static_cast<int>(center_indices.size());
  PatchSet ps;
  ps.centers = Tensor({m, 3});
  ps.groups = Tensor({m, k, 3});
  ps.source_id = cloud.id;
  const double* pts = cloud.points.data();
#pragma omp parallel for schedule(static)
  for (int gi = 0; gi < m; ++gi) {
    const int ci = center_indices[gi];
    const double cx = pts[3 * ci], cy = pts[3 * ci + 1], cz = pts[3 * ci + 2];
    std::vector<std::pair<double, int>> d(M);
    for (int i = 0; i < M; ++i) {
      const double dx = pts[3 * i] - cx, dy = pts[3 * i + 1] - cy, dz = pts[3 * i + 2] - cz;
      d[i] = {dx * dx + dy * dy + dz * dz, i};
    }
    std::nth_element(d.begin(), d.begin() + k - 1, d.end());
    std::sort(d.begin(), d.begin() + k);
    ps.centers.at(gi, 0) = cx;
    ps.centers.at(gi, 1) = cy;
    ps.centers.at(gi, 2) = cz;
    for (int j = 0; j < k; ++j) {
      const int pi = d[j].second;
      ps.groups.at(gi, j, 0) = pts[3 * pi] - cx;
      ps.groups.at(gi, j, 1) = pts[3 * pi + 1] - cy;
      ps.groups.at(gi, j, 2) = pts[3 * pi + 2] - cz;
    }
  }
  return ps;
}

AugmentParams sample_augment_params(AugmentStrength strength, uint64_t seed) {
  Rng rng(mix_seed({seed, hash_str("augment")}));
  AugmentParams p;
  p.rotation_angle = rng.uniform(0.0, 2.0 * M_PI);
  p.jitter_sigma = 0.005;
  p.jitter_seed = rng.next_u64();
  if (strength == AugmentStrength::strong) {
    for (int c = 0; c < 3; ++c) p.scale[c] = rng.uniform(0.7, 1.3);
    p.drop_ratio = rng.uniform(0.0, 0.3);
    p.drop_seed = rng.next_u64();
    for (int c = 0; c < 3; ++c) p.translation[c] = rng.uniform(-0.1, 0.1);
  }
  return p;
}

namespace {

std::vector<int> dropout_survivors(int M, double ratio, uint64_t seed) {
  const int min_keep = std::min(8, M);
  const int keep = std::max(M - static_cast<int>(std::floor(ratio * M)), min_keep);
  std::vector<int> idx(M);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

PointCloud apply_augment(const PointCloud& cloud, const AugmentParams& p) {
  const int M = cloud.size();
  if (M < 1) throw validation_error("augment: empty cloud");
  if (!cloud.points.all_finite()) throw validation_error("augment: non-finite coordinate");
  const double ca = std::cos(p.rotation_angle), sa = std::sin(p.rotation_angle);
  Tensor work({M, 3});
  Rng jit(p.jitter_seed);
  for (int i = 0; i < M; ++i) {
    const double x = cloud.points.at(i, 0);
    const double y = cloud.points.at(i, 1);
    const double z = cloud.points.at(i, 2);
    double rx = ca * x - sa * y;
    double ry = sa * x + ca * y;
    double rz = z;
    if (p.jitter_sigma > 0.0) {
      rx += std::clamp(p.jitter_sigma * jit.normal(), -p.jitter_clip, p.jitter_clip);
      ry += std::clamp(p.jitter_sigma * jit.normal(), -p.jitter_clip, p.jitter_clip);
      rz += std::clamp(p.jitter_sigma * jit.normal(), -p.jitter_clip, p.jitter_clip);
    }
    work.at(i, 0) = rx * p.scale[0] + p.translation[0];
    work.at(i, 1) = ry * p.scale[1] + p.translation[1];
    work.at(i, 2) = rz * p.scale[2] + p.translation[2];
  }
  std::vector<int> keep(M);
  std::iota(keep.begin(), keep.end(), 0);
  if (p.drop_ratio > 0.0) keep = dropout_survivors(M, p.drop_ratio, p.drop_seed);
  if (p.extra_drop_ratio > 0.0) {
    const auto second = dropout_survivors(static_cast<int>(keep.size()),
                                          p.extra_drop_ratio, p.extra_drop_seed);
    std::vector<int> merged;
    merged.reserve(second.size());
    for (int j : second) merged.push_back(keep[j]);
    keep = std::move(merged);
  }
  PointCloud out;
  out.label = cloud.label;
  out.id = cloud.id;
  out.points = Tensor({static_cast<int>(keep.size()), 3});
  for (size_t i = 0; i < keep.size(); ++i)
    for (int c = 0; c < 3; ++c) out.points.at(static_cast<int>(i), c) = work.at(keep[i], c);
  return out;
}

PointCloud augment(const PointCloud& cloud, AugmentStrength strength, uint64_t seed) {
  return apply_augment(cloud, sample_augment_params(strength, seed));
}

}  // namespace mcft
