#pragma once

// Procedural part-based objects with analytic per-point affordance scores.
// Each family is a handful of boxes and cylinders; a part's affordance is 1 on
// the part and decays to 0 over a band of 5% of the part's length.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "pavlm/dataset.hpp"
#include "pavlm/errors.hpp"
#include "pavlm/instruction.hpp"
#include "pavlm/pointcloud.hpp"
#include "pavlm/rng.hpp"

namespace pavlm {

// Verb-form names; the first entries are the ones the synthetic families use.
inline const std::vector<std::string>& default_affordance_names() {
  static const std::vector<std::string> names{
      "grasp", "contain", "lift",  "open",   "lay",    "sit",  "support", "wrap_grasp", "pour",
      "move",  "display", "push",  "pull",   "listen", "wear", "press",   "cut",        "stab"};
  return names;
}

inline constexpr double kFalloffFraction = 0.05;

using Vec3 = std::array<double, 3>;

struct Primitive {
  enum class Kind { box, cylinder } kind = Kind::box;
  Vec3 center{};
  Vec3 half{};         // box half extents
  double radius = 0;   // cylinder
  double half_len = 0;
  int axis = 2;        // cylinder axis
  bool side = true;    // which cylinder surfaces are sampled
  bool cap_lo = false;
  bool cap_hi = false;

  static Primitive box(Vec3 lo, Vec3 hi) {
    Primitive p;
    for (int a = 0; a < 3; ++a) {
      p.center[a] = 0.5 * (lo[a] + hi[a]);
      p.half[a] = 0.5 * (hi[a] - lo[a]);
    }
    return p;
  }

  static Primitive cylinder(Vec3 base, int axis, double radius, double length, bool side, bool cap_lo, bool cap_hi) {
    Primitive p;
    p.kind = Kind::cylinder;
    p.center = base;
    p.center[axis] += 0.5 * length;
    p.axis = axis;
    p.radius = radius;
    p.half_len = 0.5 * length;
    p.side = side;
    p.cap_lo = cap_lo;
    p.cap_hi = cap_hi;
    return p;
  }

  double area() const {
    if (kind == Kind::box)
      return 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]);
    const double disk = std::numbers::pi * radius * radius;
    return (side ? 2.0 * std::numbers::pi * radius * 2.0 * half_len : 0.0) + (cap_lo ? disk : 0.0) +
           (cap_hi ? disk : 0.0);
  }

  Vec3 sample(Rng& rng) const {
    if (kind == Kind::box) {
      const double faces[3] = {half[1] * half[2], half[0] * half[2], half[0] * half[1]};  // normal along 0, 1, 2
      double u = rng.uniform() * (faces[0] + faces[1] + faces[2]);
      int n = 0;
      while (n < 2 && u >= faces[n]) u -= faces[n++];
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = center[a] + rng.uniform(-half[a], half[a]);
      p[n] = center[n] + (rng.uniform() < 0.5 ? -half[n] : half[n]);
      return p;
    }
    const double disk = std::numbers::pi * radius * radius;
    const double lateral = side ? 2.0 * std::numbers::pi * radius * 2.0 * half_len : 0.0;
    double u = rng.uniform() * area();
    const int a0 = (axis + 1) % 3, a1 = (axis + 2) % 3;
    Vec3 p = center;
    if (u < lateral) {
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      p[a0] += radius * std::cos(theta);
      p[a1] += radius * std::sin(theta);
      p[axis] += rng.uniform(-half_len, half_len);
      return p;
    }
    u -= lateral;
    const bool lo = cap_lo && (!cap_hi || u < disk);
    const double r = radius * std::sqrt(rng.uniform());
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p[a0] += r * std::cos(theta);
    p[a1] += r * std::sin(theta);
    p[axis] += lo ? -half_len : half_len;
    return p;
  }

  // Distance from q to the sampled surface.
  double surface_distance(const Vec3& q) const {
    if (kind == Kind::box) {
      double outside = 0.0, inside = 1e300;
      bool in = true;
      for (int a = 0; a < 3; ++a) {
        const double d = std::abs(q[a] - center[a]) - half[a];
        if (d > 0) {
          outside += d * d;
          in = false;
        }
        inside = std::min(inside, -d);
      }
      return in ? inside : std::sqrt(outside);
    }
    const int a0 = (axis + 1) % 3, a1 = (axis + 2) % 3;
    const double r = std::hypot(q[a0] - center[a0], q[a1] - center[a1]);
    const double h = q[axis] - center[axis];
    double best = 1e300;
    if (side) {
      const double dh = std::max(std::abs(h) - half_len, 0.0);
      best = std::min(best, std::hypot(r - radius, dh));
    }
    const double dr = std::max(r - radius, 0.0);
    if (cap_lo) best = std::min(best, std::hypot(dr, h + half_len));
    if (cap_hi) best = std::min(best, std::hypot(dr, h - half_len));
    return best;
  }

  void extend_bounds(Vec3& lo, Vec3& hi) const {
    for (int a = 0; a < 3; ++a) {
      const double e = kind == Kind::box ? half[a] : (a == axis ? half_len : radius);
      lo[a] = std::min(lo[a], center[a] - e);
      hi[a] = std::max(hi[a], center[a] + e);
    }
  }
};

struct SyntheticPart {
  std::string name;
  std::string affordance;
  std::vector<Primitive> primitives;

  double length() const {
    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (const auto& p : primitives) p.extend_bounds(lo, hi);
    return std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  }

  double distance(const Vec3& q) const {
    double d = 1e300;
    for (const auto& p : primitives) d = std::min(d, p.surface_distance(q));
    return d;
  }
};

// Family with its sampled part parameters.
struct SyntheticObjectSpec {
  std::string family;  // chair | mug | knife | bottle
  std::vector<SyntheticPart> parts;
};

struct AffordanceScores {
  std::string affordance;
  int part = 0;
  double band = 0;
  std::vector<double> distance;  // per point, to the affordance part
  std::vector<float> scores;
};

struct SyntheticObject {
  SyntheticObjectSpec spec;
  PointCloud cloud;            // normalized
  std::vector<int> part_of;    // per point
  std::vector<AffordanceScores> affordances;
};

inline double falloff(double d, double band) {
  if (d <= 0.0) return 1.0;
  if (d >= band) return 0.0;
  const double t = d / band;
  return 1.0 - t * t * (3.0 - 2.0 * t);
}

inline std::string canonical_family(const std::string& name) {
  for (const char* f : {"chair", "mug", "knife", "bottle"}) {
    if (name == f || name == std::string(f) + "-like") return f;
  }
  throw InvalidArgument("unknown synthetic family: " + name);
}

inline SyntheticObjectSpec make_object_spec(const std::string& family_name, Rng& rng) {
  const std::string family = canonical_family(family_name);
  SyntheticObjectSpec s;
  s.family = family;
  auto part = [&](std::string name, std::string aff, std::vector<Primitive> prims) {
    s.parts.push_back({std::move(name), std::move(aff), std::move(prims)});
  };
  if (family == "chair") {
    const double w = rng.uniform(0.8, 1.2), d = rng.uniform(0.8, 1.2), t = rng.uniform(0.06, 0.1);
    const double leg_h = rng.uniform(0.8, 1.1), back_h = rng.uniform(0.7, 1.0), r = rng.uniform(0.04, 0.07);
    part("seat", "sit", {Primitive::box({-w / 2, -d / 2, leg_h}, {w / 2, d / 2, leg_h + t})});
    part("back", "support",
         {Primitive::box({-w / 2, -d / 2, leg_h + t}, {w / 2, -d / 2 + t, leg_h + t + back_h})});
    std::vector<Primitive> legs;
    for (double sx : {-1.0, 1.0})
      for (double sy : {-1.0, 1.0})
        legs.push_back(Primitive::cylinder({sx * (w / 2 - r), sy * (d / 2 - r), 0.0}, 2, r, leg_h, true, true, false));
    part("legs", "move", std::move(legs));
  } else if (family == "mug") {
    const double R = rng.uniform(0.35, 0.5), H = rng.uniform(0.7, 1.0), wall = rng.uniform(0.08, 0.12);
    const double reach = rng.uniform(0.2, 0.3), bar = 0.05;
    part("body", "wrap_grasp", {Primitive::cylinder({0, 0, 0}, 2, R, H, true, true, false)});
    part("interior", "contain", {Primitive::cylinder({0, 0, wall}, 2, R - wall, H - wall, true, true, false)});
    part("handle", "grasp",
         {Primitive::box({R, -bar, 0.7 * H - bar}, {R + reach, bar, 0.7 * H + bar}),
          Primitive::box({R, -bar, 0.3 * H - bar}, {R + reach, bar, 0.3 * H + bar}),
          Primitive::box({R + reach - 2 * bar, -bar, 0.3 * H + bar}, {R + reach, bar, 0.7 * H - bar})});
  } else if (family == "knife") {
    const double lh = rng.uniform(0.35, 0.5), lb = rng.uniform(0.6, 0.9), rh = rng.uniform(0.05, 0.07);
    const double bh = rng.uniform(0.06, 0.09);
    part("handle", "grasp", {Primitive::cylinder({-lh, 0, 0}, 0, rh, lh, true, true, true)});
    part("blade", "cut", {Primitive::box({0, -0.01, -bh}, {0.8 * lb, 0.01, bh})});
    part("tip", "stab", {Primitive::box({0.8 * lb, -0.01, -bh}, {lb, 0.01, 0.2 * bh})});
  } else {
    const double R = rng.uniform(0.25, 0.35), hb = rng.uniform(0.6, 0.9), rn = rng.uniform(0.08, 0.12);
    const double ln = rng.uniform(0.2, 0.3), lc = rng.uniform(0.06, 0.1);
    part("body", "wrap_grasp", {Primitive::cylinder({0, 0, 0}, 2, R, hb, true, true, true)});
    part("neck", "pour", {Primitive::cylinder({0, 0, hb}, 2, rn, ln, true, false, false)});
    part("cap", "open", {Primitive::cylinder({0, 0, hb + ln}, 2, rn + 0.02, lc, true, false, true)});
  }
  return s;
}

// Samples n surface points area-weighted, optionally applies a random yaw,
// normalizes and scores every point against every part.
inline SyntheticObject make_synthetic_object(const std::string& family, Rng& rng, Index n_points,
                                             bool random_yaw = false) {
  if (n_points < 2) throw InvalidArgument("make_synthetic_object: need at least two points");
  SyntheticObject obj;
  obj.spec = make_object_spec(family, rng);
  std::vector<std::pair<int, const Primitive*>> prims;
  std::vector<double> cumulative;
  double total = 0.0;
  for (int p = 0; p < static_cast<int>(obj.spec.parts.size()); ++p) {
    for (const auto& prim : obj.spec.parts[static_cast<std::size_t>(p)].primitives) {
      total += prim.area();
      prims.emplace_back(p, &prim);
      cumulative.push_back(total);
    }
  }
  std::vector<Vec3> local(static_cast<std::size_t>(n_points));
  obj.part_of.resize(static_cast<std::size_t>(n_points));
  for (Index i = 0; i < n_points; ++i) {
    const double u = rng.uniform() * total;
    auto j = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    j = std::min(j, prims.size() - 1);
    local[static_cast<std::size_t>(i)] = prims[j].second->sample(rng);
    obj.part_of[static_cast<std::size_t>(i)] = prims[j].first;
  }

  const double yaw = random_yaw ? rng.uniform(0.0, 2.0 * std::numbers::pi) : 0.0;
  const double c = std::cos(yaw), s = std::sin(yaw);
  obj.cloud.category = obj.spec.family;
  obj.cloud.points.resize(n_points, 3);
  for (Index i = 0; i < n_points; ++i) {
    const auto& q = local[static_cast<std::size_t>(i)];
    obj.cloud.points(i, 0) = c * q[0] - s * q[1];
    obj.cloud.points(i, 1) = s * q[0] + c * q[1];
    obj.cloud.points(i, 2) = q[2];
  }
  obj.cloud = normalize_unit_sphere(obj.cloud);

  for (int p = 0; p < static_cast<int>(obj.spec.parts.size()); ++p) {
    const auto& part = obj.spec.parts[static_cast<std::size_t>(p)];
    AffordanceScores a;
    a.affordance = part.affordance;
    a.part = p;
    a.band = kFalloffFraction * part.length();
    a.distance.resize(static_cast<std::size_t>(n_points));
    a.scores.resize(static_cast<std::size_t>(n_points));
    for (Index i = 0; i < n_points; ++i) {
      const auto k = static_cast<std::size_t>(i);
      a.distance[k] = obj.part_of[k] == p ? 0.0 : part.distance(local[k]);
      a.scores[k] = static_cast<float>(falloff(a.distance[k], a.band));
    }
    obj.affordances.push_back(std::move(a));
  }
  return obj;
}

struct SyntheticOptions {
  Index n_objects = 32;
  std::vector<std::string> families{"chair", "mug", "knife", "bottle"};
  std::uint64_t seed = 0;
  Index n_points = 512;
  double partial_fraction = 0.0;
  double partial_keep = 0.6;
  bool random_yaw = false;
};

// Writes clouds, ground truth, records and manifest under `root` and returns
// the loaded dataset. Object i belongs to families[i % F].
inline Dataset generate_synthetic_dataset(const SyntheticOptions& opt, const fs::path& root) {
  if (opt.families.empty()) throw InvalidArgument("generate_synthetic_dataset: no families");
  std::vector<std::string> families;
  for (const auto& f : opt.families) families.push_back(canonical_family(f));
  if (opt.n_objects < static_cast<Index>(families.size()))
    throw InvalidArgument("generate_synthetic_dataset: n_objects must be at least the number of families");
  if (opt.partial_fraction < 0.0 || opt.partial_fraction > 1.0)
    throw InvalidArgument("generate_synthetic_dataset: partial_fraction must lie in [0, 1]");

  Rng rng(opt.seed);
  const auto n_objects = static_cast<std::size_t>(opt.n_objects);
  std::vector<std::size_t> order(n_objects);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  std::vector<bool> has_partial(n_objects, false);
  const auto n_partial = static_cast<std::size_t>(std::llround(opt.partial_fraction * static_cast<double>(n_objects)));
  for (std::size_t i = 0; i < n_partial; ++i) has_partial[order[i]] = true;

  Dataset ds;
  ds.root = root;
  ds.manifest.vocabulary = LabelVocabulary(default_affordance_names());
  for (const auto& f : families)
    if (std::find(ds.manifest.categories.begin(), ds.manifest.categories.end(), f) == ds.manifest.categories.end())
      ds.manifest.categories.push_back(f);
  for (const char* h : {"mug", "knife"})
    if (std::find(families.begin(), families.end(), h) != families.end()) ds.manifest.held_out_categories.push_back(h);

  auto emit = [&](const std::string& id, const PointCloud& cloud, const std::vector<AffordanceScores>& affs,
                  const std::vector<Index>* remap) {
    const std::string cloud_rel = "clouds/" + id + ".pavl";
    write_point_cloud(cloud.points, root / cloud_rel);
    for (const auto& a : affs) {
      std::vector<float> scores(static_cast<std::size_t>(cloud.size()));
      for (Index i = 0; i < cloud.size(); ++i) {
        const auto src = remap ? (*remap)[static_cast<std::size_t>(i)] : i;
        scores[static_cast<std::size_t>(i)] = a.scores[static_cast<std::size_t>(src)];
      }
      const std::string gt_rel = "gt/" + id + "_" + a.affordance + ".pavg";
      write_ground_truth(scores, root / gt_rel);
      const auto qa = render_seed_qa(cloud.category, a.affordance);
      DatasetRecord r;
      r.instruct = qa.instruct_text;
      r.input = cloud_rel;
      r.answer = qa.answer_text;
      r.affordance_map = gt_rel;
      r.affordance = a.affordance;
      r.category = cloud.category;
      r.shape_kind = cloud.shape_kind;
      r.source = "synthetic";
      r.object_id = id;
      ds.records.push_back(std::move(r));
    }
  };

  for (std::size_t i = 0; i < n_objects; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "obj%04zu", i);
    auto obj = make_synthetic_object(families[i % families.size()], rng, opt.n_points, opt.random_yaw);
    emit(id, obj.cloud, obj.affordances, nullptr);
    if (has_partial[i]) {
      Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
      if (dir[0] == 0 && dir[1] == 0 && dir[2] == 0) dir = {1, 0, 0};
      auto view = make_partial_view_indexed(obj.cloud, dir, opt.partial_keep);
      emit(std::string(id) + "_partial", view.cloud, obj.affordances, &view.source_indices);
    }
  }
  write_dataset(ds);
  ds.manifest.record_count = ds.records.size();
  return ds;
}

}  // namespace pavlm
