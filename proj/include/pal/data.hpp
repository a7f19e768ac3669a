#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "pal/error.hpp"
#include "pal/matrix.hpp"
#include "pal/rng.hpp"

namespace pal {

enum class Split : std::uint8_t { MetaTrain = 0, MetaVal = 1, MetaTest = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::MetaTrain: return "meta-train";
    case Split::MetaVal: return "meta-val";
    case Split::MetaTest: return "meta-test";
  }
  return "?";
}

inline Split split_from_name(const std::string& name) {
  if (name == "meta-train") return Split::MetaTrain;
  if (name == "meta-val") return Split::MetaVal;
  if (name == "meta-test") return Split::MetaTest;
  throw ConfigError("unknown split name: " + name);
}

// One video after backbone extraction: a row per frame feature, plus label.
struct VideoSample {
  Matrix frames;       // F x d_raw
  std::uint32_t label = 0;
  std::uint64_t id = 0;
};

class Dataset {
 public:
  Dataset() = default;

  // Validates sample invariants and derives the ordered class set.
  Dataset(std::vector<VideoSample> samples, Split split,
          std::vector<std::string> class_names = {}, std::string source = "")
      : samples_(std::move(samples)),
        split_(split),
        class_names_(std::move(class_names)),
        source_(std::move(source)) {
    std::unordered_set<std::uint64_t> ids;
    for (const auto& s : samples_) {
      if (s.frames.rows() == 0)
        throw PreconditionError("dataset: sample " + std::to_string(s.id) + " has no frames");
      if (!s.frames.all_finite())
        throw PreconditionError("dataset: sample " + std::to_string(s.id) +
                                " has non-finite frame values");
      if (!ids.insert(s.id).second)
        throw PreconditionError("dataset: duplicate sample id " + std::to_string(s.id));
    }
    for (const auto& s : samples_) classes_.push_back(s.label);
    std::sort(classes_.begin(), classes_.end());
    classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
    if (!class_names_.empty() && class_names_.size() != classes_.size())
      throw PreconditionError("dataset: class name count " + std::to_string(class_names_.size()) +
                              " does not match class count " + std::to_string(classes_.size()));
    by_class_.resize(classes_.size());
    for (std::size_t i = 0; i < samples_.size(); ++i)
      by_class_[class_index(samples_[i].label)].push_back(i);
  }

  const std::vector<VideoSample>& samples() const { return samples_; }
  const VideoSample& sample(std::size_t i) const { return samples_[i]; }
  const std::vector<std::uint32_t>& classes() const { return classes_; }
  Split split() const { return split_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::string& source() const { return source_; }
  std::size_t feature_dim() const { return samples_.empty() ? 0 : samples_[0].frames.cols(); }

  std::size_t class_index(std::uint32_t label) const {
    auto it = std::lower_bound(classes_.begin(), classes_.end(), label);
    if (it == classes_.end() || *it != label)
      throw PreconditionError("dataset: label " + std::to_string(label) + " not in class set");
    return static_cast<std::size_t>(it - classes_.begin());
  }

  const std::vector<std::size_t>& samples_of_class(std::size_t class_idx) const {
    return by_class_[class_idx];
  }

 private:
  std::vector<VideoSample> samples_;
  std::vector<std::uint32_t> classes_;  // ordered, ascending
  Split split_ = Split::MetaTrain;
  std::vector<std::string> class_names_;  // parallel to classes_, may be empty
  std::string source_;
  std::vector<std::vector<std::size_t>> by_class_;
};

// Meta-train/val/test class sets must not overlap.
inline void ensure_disjoint_classes(const Dataset& a, const Dataset& b) {
  for (std::uint32_t c : a.classes())
    if (std::binary_search(b.classes().begin(), b.classes().end(), c))
      throw PreconditionError(std::string("splits ") + split_name(a.split()) + " and " +
                              split_name(b.split()) + " share class " + std::to_string(c));
}

// One N-way K-shot task. Sample indices refer into the source dataset;
// labels are remapped to episode-local ids 0..N-1.
struct Episode {
  std::vector<std::size_t> support_indices;  // N*K, grouped by class
  std::vector<std::size_t> query_indices;    // N*Q, grouped by class
  std::vector<std::uint32_t> support_labels;           // episode-local
  std::vector<std::uint32_t> query_labels;
  int way = 0, shot = 0, query_per_class = 0;
};

// ---------------------------------------------------------------------------
// TSN-style sparse frame sampling
// ---------------------------------------------------------------------------

// Closed segment [first, last] of frame indices covered by segment `i` of `t`.
inline std::pair<std::size_t, std::size_t> segment_range(std::size_t frame_count, std::size_t t,
                                                         std::size_t i) {
  if (frame_count >= t) {
    // contiguous partition, first (F mod T) segments one frame longer
    const std::size_t base = frame_count / t, rem = frame_count % t;
    const std::size_t start = i * base + std::min(i, rem);
    const std::size_t len = base + (i < rem ? 1 : 0);
    return {start, start + len - 1};
  }
  // short video: index-range segments that may overlap/repeat frames
  const std::size_t start = i * frame_count / t;
  const std::size_t end = (i + 1) * frame_count + t - 1;  // ceil((i+1)F/T) - 1, via (x+t-1)/t
  return {start, end / t - 1};
}

// One uniformly random frame per segment; rows come out in segment order.
inline Matrix sample_frames(const VideoSample& v, std::size_t segments, Rng& rng) {
  if (segments == 0) throw PreconditionError("sample_frames: segment count must be >= 1");
  const std::size_t f = v.frames.rows();
  Matrix out(segments, v.frames.cols());
  for (std::size_t i = 0; i < segments; ++i) {
    auto [lo, hi] = segment_range(f, segments, i);
    const std::size_t pick = lo + rng.index(hi - lo + 1);
    std::copy(v.frames.row(pick).begin(), v.frames.row(pick).end(), out.row(i).begin());
  }
  return out;
}

// Deterministic variant: the middle frame of each segment.
inline Matrix center_frames(const VideoSample& v, std::size_t segments) {
  if (segments == 0) throw PreconditionError("center_frames: segment count must be >= 1");
  const std::size_t f = v.frames.rows();
  Matrix out(segments, v.frames.cols());
  for (std::size_t i = 0; i < segments; ++i) {
    auto [lo, hi] = segment_range(f, segments, i);
    const std::size_t pick = lo + (hi - lo) / 2;
    std::copy(v.frames.row(pick).begin(), v.frames.row(pick).end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episode sampling
// ---------------------------------------------------------------------------

inline Episode sample_episode(const Dataset& ds, std::size_t n, std::size_t k, std::size_t q,
                              Rng& rng) {
  if (n == 0 || k == 0 || q == 0)
    throw PreconditionError("sample_episode: way/shot/query must all be >= 1");
  if (ds.classes().size() < n)
    throw CapacityError("sample_episode: need " + std::to_string(n) + " classes, dataset " +
                        split_name(ds.split()) + " has " + std::to_string(ds.classes().size()));
  Episode ep;
  ep.way = static_cast<int>(n);
  ep.shot = static_cast<int>(k);
  ep.query_per_class = static_cast<int>(q);
  const auto chosen = rng.sample_without_replacement(ds.classes().size(), n);
  for (std::size_t local = 0; local < n; ++local) {
    const auto& pool = ds.samples_of_class(chosen[local]);
    if (pool.size() < k + q)
      throw CapacityError("sample_episode: class " + std::to_string(ds.classes()[chosen[local]]) +
                          " has " + std::to_string(pool.size()) + " samples, episode needs " +
                          std::to_string(k + q));
    const auto picks = rng.sample_without_replacement(pool.size(), k + q);
    for (std::size_t i = 0; i < k; ++i) {
      ep.support_indices.push_back(pool[picks[i]]);
      ep.support_labels.push_back(static_cast<std::uint32_t>(local));
    }
    for (std::size_t i = k; i < k + q; ++i) {
      ep.query_indices.push_back(pool[picks[i]]);
      ep.query_labels.push_back(static_cast<std::uint32_t>(local));
    }
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark generator
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t classes = 20;
  std::size_t per_class = 40;
  std::size_t d_raw = 64;
  std::size_t frames = 8;
  double sigma_between = 1.0;   // class-center spread
  double sigma_within = 0.4;    // per-video latent spread around the center
  double outlier_fraction = 0.2;
  double outlier_scale = 6.0;   // displacement in units of sigma_within
  Split split = Split::MetaTrain;
  std::uint32_t class_id_offset = 0;
  std::uint64_t sample_id_offset = 0;
};

struct SyntheticResult {
  Dataset dataset;
  std::vector<std::uint64_t> outlier_ids;  // sample ids whose latent was displaced
};

namespace detail {
inline double quantize_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline std::vector<double> gaussian_vec(std::size_t d, double stddev, Rng& rng) {
  std::vector<double> v(d);
  for (auto& x : v) x = stddev * rng.normal();
  return v;
}
}  // namespace detail

// Gaussian class clusters with per-video latents, per-frame jitter at
// sigma_within/4, and a fixed fraction of videos per class displaced by
// outlier_scale * sigma_within in a random direction. Frame values are
// quantized to f32 so file round-trips are exact.
//
// All scales follow one per-dimension convention: sigma_between and
// sigma_within are per-dimension stds, and the outlier displacement is
// outlier_scale * sigma_within per dimension — a vector of norm
// outlier_scale * sigma_within * sqrt(d_raw), i.e. outlier_scale times the
// typical within-class radius. A whole-vector displacement of only
// outlier_scale * sigma_within would vanish inside the noise shell once
// d_raw exceeds outlier_scale^2, defeating the knob's purpose.
inline SyntheticResult generate_synthetic(const SyntheticSpec& spec, Rng& rng) {
  if (spec.sigma_between <= 0 || spec.sigma_within <= 0)
    throw PreconditionError("generate_synthetic: spreads must be positive");
  if (spec.outlier_fraction < 0 || spec.outlier_fraction >= 1)
    throw PreconditionError("generate_synthetic: outlier fraction must be in [0, 1)");
  if (spec.outlier_scale < 1)
    throw PreconditionError("generate_synthetic: outlier scale must be >= 1");
  if (spec.classes == 0 || spec.per_class == 0 || spec.d_raw == 0 || spec.frames == 0)
    throw PreconditionError("generate_synthetic: counts must be >= 1");

  SyntheticResult result;
  std::vector<VideoSample> samples;
  std::vector<std::string> names;
  std::uint64_t next_id = spec.sample_id_offset;
  const std::size_t outliers_per_class =
      static_cast<std::size_t>(std::llround(spec.outlier_fraction * spec.per_class));
  const double root_d = std::sqrt(static_cast<double>(spec.d_raw));

  for (std::size_t c = 0; c < spec.classes; ++c) {
    names.push_back("synthetic_" + std::to_string(spec.class_id_offset + c));
    const auto center = detail::gaussian_vec(spec.d_raw, spec.sigma_between, rng);
    auto outlier_picks = rng.sample_without_replacement(spec.per_class, outliers_per_class);
    std::unordered_set<std::size_t> outlier_set(outlier_picks.begin(), outlier_picks.end());
    for (std::size_t v = 0; v < spec.per_class; ++v) {
      std::vector<double> latent = detail::gaussian_vec(spec.d_raw, spec.sigma_within, rng);
      for (std::size_t j = 0; j < spec.d_raw; ++j) latent[j] += center[j];
      const bool is_outlier = outlier_set.count(v) > 0;
      if (is_outlier) {
        auto dir = detail::gaussian_vec(spec.d_raw, 1.0, rng);
        double norm = 0.0;
        for (double x : dir) norm += x * x;
        norm = std::sqrt(norm);
        const double step = spec.outlier_scale * spec.sigma_within * root_d / norm;
        for (std::size_t j = 0; j < spec.d_raw; ++j) latent[j] += step * dir[j];
      }
      VideoSample s;
      s.id = next_id++;
      s.label = spec.class_id_offset + static_cast<std::uint32_t>(c);
      s.frames = Matrix(spec.frames, spec.d_raw);
      for (std::size_t fr = 0; fr < spec.frames; ++fr) {
        const auto jitter = detail::gaussian_vec(spec.d_raw, spec.sigma_within / 4.0, rng);
        for (std::size_t j = 0; j < spec.d_raw; ++j)
          s.frames(fr, j) = detail::quantize_f32(latent[j] + jitter[j]);
      }
      if (is_outlier) result.outlier_ids.push_back(s.id);
      samples.push_back(std::move(s));
    }
  }
  result.dataset = Dataset(std::move(samples), spec.split, std::move(names), "synthetic");
  return result;
}

// ---------------------------------------------------------------------------
// Feature file format "FSFE"
//
// Binary, little-endian: magic "FSFE", version u32=1, split u8 (0/1/2),
// class_count u32, sample_count u32, d_raw u32; then per sample:
// id u64, label u32, frame_count u32, frame_count*d_raw f32 values
// row-major. Class names live in a sidecar JSON manifest at <path>.json.
// ---------------------------------------------------------------------------

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot open for writing: " + path);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    raw(b, 4);
  }
  void u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    raw(b, 8);
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(const char* p, std::size_t n) { raw(p, n); }
  void close() {
    out_.close();
    if (!out_) throw Error("write failed while closing file");
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw Error("write failed");
  }
  std::ofstream out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open for reading: " + path);
  }
  std::size_t offset() const { return offset_; }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    raw(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint8_t b[8];
    raw(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void bytes(char* p, std::size_t n) { raw(p, n); }
  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError("unexpected end of file", offset_ + static_cast<std::size_t>(in_.gcount()));
    offset_ += n;
  }
  std::ifstream in_;
  std::size_t offset_ = 0;
};

}  // namespace detail

inline void save_features(const Dataset& ds, const std::string& path) {
  detail::ByteWriter w(path);
  w.bytes("FSFE", 4);
  w.u32(1);
  w.u8(static_cast<std::uint8_t>(ds.split()));
  w.u32(static_cast<std::uint32_t>(ds.classes().size()));
  w.u32(static_cast<std::uint32_t>(ds.samples().size()));
  w.u32(static_cast<std::uint32_t>(ds.feature_dim()));
  for (const auto& s : ds.samples()) {
    w.u64(s.id);
    w.u32(s.label);
    w.u32(static_cast<std::uint32_t>(s.frames.rows()));
    for (std::size_t i = 0; i < s.frames.size(); ++i)
      w.f32(static_cast<float>(s.frames.data()[i]));
  }
  w.close();

  nlohmann::json manifest;
  manifest["classes"] = ds.class_names().empty()
                            ? [&] {
                                std::vector<std::string> names;
                                for (auto c : ds.classes())
                                  names.push_back("class_" + std::to_string(c));
                                return names;
                              }()
                            : ds.class_names();
  manifest["split"] = split_name(ds.split());
  manifest["source"] = ds.source();
  std::ofstream mf(path + ".json");
  if (!mf) throw Error("cannot open for writing: " + path + ".json");
  mf << manifest.dump(2) << "\n";
}

inline Dataset load_features(const std::string& path) {
  detail::ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "FSFE", 4) != 0) throw FormatError("bad magic, expected FSFE", 0);
  const std::uint32_t version = r.u32();
  if (version != 1) throw FormatError("unsupported version " + std::to_string(version), 4);
  const std::uint8_t split_tag = r.u8();
  if (split_tag > 2) throw FormatError("bad split tag " + std::to_string(split_tag), 8);
  const std::uint32_t class_count = r.u32();
  const std::uint32_t sample_count = r.u32();
  const std::uint32_t d_raw = r.u32();

  std::vector<VideoSample> samples;
  samples.reserve(sample_count);
  for (std::uint32_t i = 0; i < sample_count; ++i) {
    VideoSample s;
    s.id = r.u64();
    s.label = r.u32();
    const std::uint32_t frame_count = r.u32();
    if (frame_count == 0) throw FormatError("sample with zero frames", r.offset() - 4);
    s.frames = Matrix(frame_count, d_raw);
    for (std::size_t e = 0; e < s.frames.size(); ++e)
      s.frames.data()[e] = static_cast<double>(r.f32());
    samples.push_back(std::move(s));
  }

  std::vector<std::string> names;
  std::string source;
  std::ifstream mf(path + ".json");
  if (mf) {
    nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, /*allow_exceptions=*/false);
    if (!manifest.is_discarded()) {
      if (manifest.contains("classes")) names = manifest["classes"].get<std::vector<std::string>>();
      if (manifest.contains("source")) source = manifest["source"].get<std::string>();
    }
  }

  Dataset ds(std::move(samples), static_cast<Split>(split_tag), std::move(names),
             std::move(source));
  if (ds.classes().size() != class_count)
    throw FormatError("class_count " + std::to_string(class_count) + " does not match " +
                          std::to_string(ds.classes().size()) + " distinct labels",
                      9);
  return ds;
}

}  // namespace pal
