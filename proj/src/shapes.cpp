#include "mcft/shapes.hpp"

#include <algorithm>
#include <cmath>

namespace mcft {
namespace shapes {

namespace {

// Canonical dimensions (pre-normalization; the data pipeline rescales clouds
// anyway, these just need distinct, non-degenerate geometry).
constexpr double kCylR = 0.7, kCylH = 1.0;                  // half-height
constexpr double kConeR = 0.8, kConeApexZ = 1.0, kConeBaseZ = -1.0;
constexpr double kTorusR = 0.6, kTorusr = 0.25;
constexpr double kPyrHalf = 0.8, kPyrBaseZ = -0.6, kPyrApexZ = 1.0;
constexpr double kEllA = 1.0, kEllB = 0.8, kEllC = 0.6;
constexpr double kHelR = 0.6, kHelTube = 0.1, kHelZ0 = -0.8, kHelZ1 = 0.8;
constexpr double kHelTheta = 4.0 * M_PI;  // two turns

inline double sq(double x) { return x * x; }
inline double norm2d(double a, double b) { return std::sqrt(a * a + b * b); }

inline Vec3 sub(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 addv(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 mul(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

// Distance from 2D point (pr, pz) to segment (a)-(b); used for surfaces of
// revolution, where 3D distance equals distance in the (radius, z) half-plane.
double segment_dist_2d(double pr, double pz, double ar, double az, double br, double bz) {
  const double dr = br - ar, dz = bz - az;
  const double len2 = dr * dr + dz * dz;
  double t = ((pr - ar) * dr + (pz - az) * dz) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return norm2d(pr - (ar + t * dr), pz - (az + t * dz));
}

// Ericson-style point/triangle distance.
double triangle_dist(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = sub(b, a), ac = sub(c, a), ap = sub(p, a);
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0.0 && d2 <= 0.0) return norm(ap);
  const Vec3 bp = sub(p, b);
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0.0 && d4 <= d3) return norm(bp);
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return norm(sub(p, addv(a, mul(ab, v))));
  }
  const Vec3 cp = sub(p, c);
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0.0 && d5 <= d6) return norm(cp);
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return norm(sub(p, addv(a, mul(ac, w))));
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return norm(sub(p, addv(b, mul(sub(c, b), w))));
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return norm(sub(p, addv(a, addv(mul(ab, v), mul(ac, w)))));
}

void pyramid_corners(Vec3 out[4]) {
  out[0] = {kPyrHalf, kPyrHalf, kPyrBaseZ};
  out[1] = {-kPyrHalf, kPyrHalf, kPyrBaseZ};
  out[2] = {-kPyrHalf, -kPyrHalf, kPyrBaseZ};
  out[3] = {kPyrHalf, -kPyrHalf, kPyrBaseZ};
}

Vec3 helix_center(double theta) {
  const double c = (kHelZ1 - kHelZ0) / kHelTheta;
  return {kHelR * std::cos(theta), kHelR * std::sin(theta), kHelZ0 + c * theta};
}

double helix_curve_dist(const Vec3& p) {
  // Coarse grid then golden-section refinement; the squared distance along
  // theta is smooth and locally unimodal around the global minimum.
  const int kGrid = 1024;
  auto d2 = [&](double th) {
    const Vec3 c = helix_center(th);
    return sq(p[0] - c[0]) + sq(p[1] - c[1]) + sq(p[2] - c[2]);
  };
  int best = 0;
  double bd = d2(0.0);
  for (int i = 1; i <= kGrid; ++i) {
    const double th = kHelTheta * i / kGrid;
    const double v = d2(th);
    if (v < bd) {
      bd = v;
      best = i;
    }
  }
  double lo = kHelTheta * std::max(best - 1, 0) / kGrid;
  double hi = kHelTheta * std::min(best + 1, kGrid) / kGrid;
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
  double f1 = d2(x1), f2 = d2(x2);
  for (int it = 0; it < 80; ++it) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - gr * (hi - lo);
      f1 = d2(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + gr * (hi - lo);
      f2 = d2(x2);
    }
  }
  return std::sqrt(std::min(f1, f2));
}

double ellipsoid_dist(const Vec3& p) {
  const double a2[3] = {sq(kEllA), sq(kEllB), sq(kEllC)};
  const double pn = norm(p);
  if (pn < 1e-12) return std::min({kEllA, kEllB, kEllC});
  // Nearest point q_i = a_i^2 p_i / (t + a_i^2); solve F(t) = 1 by bisection.
  auto F = [&](double t) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += a2[i] * sq(p[i]) / sq(t + a2[i]);
    return s;
  };
  const double amin2 = std::min({a2[0], a2[1], a2[2]});
  double lo = -amin2 + 1e-12;
  double hi = std::max(1.0, pn) * std::max({kEllA, kEllB, kEllC});
  while (F(hi) > 1.0) hi *= 2.0;
  if (F(lo) < 1.0) {
    // p is very close to the axis of the smallest semi-axis; fall back to a
    // fine scan which is adequate for validation purposes.
    double best = 1e300;
    for (int i = 0; i <= 20000; ++i) {
      const double u = 2.0 * M_PI * i / 20000.0;
      for (int j = 0; j <= 100; ++j) {
        const double v = M_PI * j / 100.0 - M_PI / 2.0;
        const Vec3 q = {kEllA * std::cos(v) * std::cos(u),
                        kEllB * std::cos(v) * std::sin(u), kEllC * std::sin(v)};
        best = std::min(best, norm(sub(p, q)));
      }
    }
    return best;
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (F(mid) > 1.0)
      lo = mid;
    else
      hi = mid;
  }
  const double t = 0.5 * (lo + hi);
  Vec3 q;
  for (int i = 0; i < 3; ++i) q[i] = a2[i] * p[i] / (t + a2[i]);
  return norm(sub(p, q));
}

Vec3 sphere_dir(Rng& rng) {
  double x, y, z, n;
  do {
    x = rng.normal();
    y = rng.normal();
    z = rng.normal();
    n = std::sqrt(x * x + y * y + z * z);
  } while (n < 1e-12);
  return {x / n, y / n, z / n};
}

Vec3 sample_triangle(const Vec3& a, const Vec3& b, const Vec3& c, Rng& rng) {
  const double su = std::sqrt(rng.uniform());
  const double v = rng.uniform();
  return addv(mul(a, 1.0 - su), addv(mul(b, su * (1.0 - v)), mul(c, su * v)));
}

}  // namespace

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> names = {
      "sphere", "cube", "cylinder", "cone", "torus", "pyramid", "ellipsoid", "helix"};
  return names;
}

Family family_from_name(const std::string& name) {
  const auto& names = family_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Family>(i);
  throw config_error("unknown shape family: " + name);
}

Vec3 sample_surface(Family f, Rng& rng) {
  switch (f) {
    case Family::sphere:
      return sphere_dir(rng);
    case Family::cube: {
      const int face = static_cast<int>(rng.below(6));
      const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
      const double s = (face % 2 == 0) ? 1.0 : -1.0;
      if (face / 2 == 0) return {s, u, v};
      if (face / 2 == 1) return {u, s, v};
      return {u, v, s};
    }
    case Family::cylinder: {
      const double side = 2.0 * M_PI * kCylR * (2.0 * kCylH);
      const double cap = M_PI * sq(kCylR);
      const double u = rng.uniform() * (side + 2.0 * cap);
      if (u < side) {
        const double phi = rng.uniform(0.0, 2.0 * M_PI);
        const double z = rng.uniform(-kCylH, kCylH);
        return {kCylR * std::cos(phi), kCylR * std::sin(phi), z};
      }
      const double z = (u < side + cap) ? kCylH : -kCylH;
      const double rr = kCylR * std::sqrt(rng.uniform());
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      return {rr * std::cos(phi), rr * std::sin(phi), z};
    }
    case Family::cone: {
      const double slant = norm2d(kConeR, kConeApexZ - kConeBaseZ);
      const double lat = M_PI * kConeR * slant;
      const double base = M_PI * sq(kConeR);
      const double u = rng.uniform() * (lat + base);
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      if (u < lat) {
        const double s = std::sqrt(rng.uniform());  // area-uniform along slant
        return {kConeR * s * std::cos(phi), kConeR * s * std::sin(phi),
                kConeApexZ + s * (kConeBaseZ - kConeApexZ)};
      }
      const double rr = kConeR * std::sqrt(rng.uniform());
      return {rr * std::cos(phi), rr * std::sin(phi), kConeBaseZ};
    }
    case Family::torus: {
      // Area element is proportional to R + r*cos(phi): rejection sample phi.
      double phi;
      do {
        phi = rng.uniform(0.0, 2.0 * M_PI);
      } while (rng.uniform() * (kTorusR + kTorusr) > kTorusR + kTorusr * std::cos(phi));
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      const double w = kTorusR + kTorusr * std::cos(phi);
      return {w * std::cos(theta), w * std::sin(theta), kTorusr * std::sin(phi)};
    }
    case Family::pyramid: {
      Vec3 c[4];
      pyramid_corners(c);
      const Vec3 apex = {0.0, 0.0, kPyrApexZ};
      const double base_area = sq(2.0 * kPyrHalf);
      const Vec3 em = {kPyrHalf, 0.0, kPyrBaseZ};
      const double lat_area =
          0.5 * (2.0 * kPyrHalf) * norm(sub(apex, em)) * 4.0;  // all four sides
      const double u = rng.uniform() * (base_area + lat_area);
      if (u < base_area) {
        const double x = rng.uniform(-kPyrHalf, kPyrHalf);
        const double y = rng.uniform(-kPyrHalf, kPyrHalf);
        return {x, y, kPyrBaseZ};
      }
      const int face = static_cast<int>(rng.below(4));
      return sample_triangle(c[face], c[(face + 1) % 4], apex, rng);
    }
    case Family::ellipsoid: {
      const Vec3 d = sphere_dir(rng);
      return {kEllA * d[0], kEllB * d[1], kEllC * d[2]};
    }
    case Family::helix: {
      const double theta = rng.uniform(0.0, kHelTheta);
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      const double c = (kHelZ1 - kHelZ0) / kHelTheta;
      Vec3 tangent = {-kHelR * std::sin(theta), kHelR * std::cos(theta), c};
      tangent = mul(tangent, 1.0 / norm(tangent));
      const Vec3 normal = {-std::cos(theta), -std::sin(theta), 0.0};
      const Vec3 binorm = cross(tangent, normal);
      const Vec3 offset =
          addv(mul(normal, kHelTube * std::cos(phi)), mul(binorm, kHelTube * std::sin(phi)));
      return addv(helix_center(theta), offset);
    }
  }
  throw config_error("unhandled shape family");
}

double surface_distance(Family f, const Vec3& p) {
  switch (f) {
    case Family::sphere:
      return std::fabs(norm(p) - 1.0);
    case Family::cube: {
      const double qx = std::fabs(p[0]) - 1.0;
      const double qy = std::fabs(p[1]) - 1.0;
      const double qz = std::fabs(p[2]) - 1.0;
      const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0), oz = std::max(qz, 0.0);
      const double outside = std::sqrt(ox * ox + oy * oy + oz * oz);
      const double inside = std::min(std::max({qx, qy, qz}), 0.0);
      return std::fabs(outside + inside);
    }
    case Family::cylinder: {
      const double rho = norm2d(p[0], p[1]);
      const double side = segment_dist_2d(rho, p[2], kCylR, -kCylH, kCylR, kCylH);
      const double cap_r = std::max(rho - kCylR, 0.0);
      const double cap_top = norm2d(cap_r, p[2] - kCylH);
      const double cap_bot = norm2d(cap_r, p[2] + kCylH);
      return std::min({side, cap_top, cap_bot});
    }
    case Family::cone: {
      const double rho = norm2d(p[0], p[1]);
      const double lat = segment_dist_2d(rho, p[2], 0.0, kConeApexZ, kConeR, kConeBaseZ);
      const double base = norm2d(std::max(rho - kConeR, 0.0), p[2] - kConeBaseZ);
      return std::min(lat, base);
    }
    case Family::torus: {
      const double rho = norm2d(p[0], p[1]);
      return std::fabs(norm2d(rho - kTorusR, p[2]) - kTorusr);
    }
    case Family::pyramid: {
      Vec3 c[4];
      pyramid_corners(c);
      const Vec3 apex = {0.0, 0.0, kPyrApexZ};
      double best = 1e300;
      for (int i = 0; i < 4; ++i)
        best = std::min(best, triangle_dist(p, c[i], c[(i + 1) % 4], apex));
      best = std::min(best, triangle_dist(p, c[0], c[1], c[2]));
      best = std::min(best, triangle_dist(p, c[0], c[2], c[3]));
      return best;
    }
    case Family::ellipsoid:
      return ellipsoid_dist(p);
    case Family::helix:
      return std::fabs(helix_curve_dist(p) - kHelTube);
  }
  throw config_error("unhandled shape family");
}

}  // namespace shapes
}  // namespace mcft
