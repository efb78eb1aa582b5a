#pragma once

// Visual target features: frame selection, per-frame providers, averaging.

#include "neuro3d/binary_io.hpp"
#include "neuro3d/random.hpp"

#include <Eigen/Dense>

#include "json.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuro3d::visual {

inline constexpr int kDefaultFrames = 4;
inline constexpr int kVideoFrames = 180;

class DegenerateFeatureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProviderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// n indices spread uniformly over [0, total-1], both ends included:
/// i -> ceil(i*(total-1)/(n-1)).
inline std::vector<int> select_frames(int total, int n = kDefaultFrames) {
  if (total <= 0 || n <= 0) throw std::invalid_argument("select_frames: counts must be positive");
  if (n > total) throw std::invalid_argument("select_frames: more frames requested than the video has");
  if (n == 1) return {0};
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const long long num = static_cast<long long>(i) * (total - 1);
    idx[static_cast<std::size_t>(i)] = static_cast<int>((num + (n - 1) - 1) / (n - 1));
  }
  return idx;
}

struct Stimulus {
  int stimulus_id = 0;
  int object_class = 0;
  int color_class = 0;
  int frame_count = kVideoFrames;
};

class Provider {
 public:
  virtual ~Provider() = default;
  virtual int dim() const = 0;
  /// Feature of one selected frame; `slot` is the frame's position within
  /// the selection and `frame` its index in the video.
  virtual Eigen::VectorXd frame_feature(const Stimulus& s, int slot, int frame) const = 0;
};

/// Mean of the per-frame features, unit-normalized.
inline Eigen::VectorXd visual_feature(const Stimulus& s, const Provider& provider, int n = kDefaultFrames) {
  const auto frames = select_frames(s.frame_count, n);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(provider.dim());
  for (int slot = 0; slot < n; ++slot) {
    const int frame = frames[static_cast<std::size_t>(slot)];
    Eigen::VectorXd f;
    try {
      f = provider.frame_feature(s, slot, frame);
    } catch (const std::exception& e) {
      throw ProviderError("visual feature provider failed on stimulus " + std::to_string(s.stimulus_id) + " frame " +
                          std::to_string(frame) + ": " + e.what());
    }
    if (f.size() != provider.dim()) throw ProviderError("visual feature provider returned the wrong dimension");
    acc += f;
  }
  acc /= static_cast<double>(n);
  const double norm = acc.norm();
  if (!(norm > 1e-12 * std::sqrt(static_cast<double>(acc.size())))) {
    throw DegenerateFeatureError("degenerate visual feature for stimulus " + std::to_string(s.stimulus_id) +
                                 ": frame features average to zero");
  }
  return acc / norm;
}

/// Adapts a callable to the Provider interface.
class FunctionProvider : public Provider {
 public:
  using Fn = std::function<Eigen::VectorXd(const Stimulus&, int, int)>;
  FunctionProvider(int dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}
  int dim() const override { return dim_; }
  Eigen::VectorXd frame_feature(const Stimulus& s, int slot, int frame) const override { return fn_(s, slot, frame); }

 private:
  int dim_;
  Fn fn_;
};

/// Deterministic stand-in for an image encoder: a class code plus a color
/// code plus a small per-frame term, rotated by a fixed random orthogonal
/// matrix and unit-normalized.
class StubProvider : public Provider {
 public:
  explicit StubProvider(std::uint64_t seed, int dim = 1024, double color_weight = 0.7, double frame_weight = 0.1)
      : seed_(seed), dim_(dim), color_weight_(color_weight), frame_weight_(frame_weight) {
    RandomStream rng(derive_seed(seed, {0x51}));
    Eigen::MatrixXd g(dim, dim);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    rotation_ = qr.householderQ() * Eigen::MatrixXd::Identity(dim, dim);
  }

  int dim() const override { return dim_; }

  Eigen::VectorXd frame_feature(const Stimulus& s, int /*slot*/, int frame) const override {
    Eigen::VectorXd v = code({0xC1A5, static_cast<std::uint64_t>(s.object_class)}) +
                        color_weight_ * code({0xC010, static_cast<std::uint64_t>(s.color_class)}) +
                        frame_weight_ * code({0xF4A3, static_cast<std::uint64_t>(s.object_class),
                                              static_cast<std::uint64_t>(s.color_class), static_cast<std::uint64_t>(frame)});
    Eigen::VectorXd out = rotation_ * v;
    return out / out.norm();
  }

 private:
  Eigen::VectorXd code(std::initializer_list<std::uint64_t> tags) const {
    std::vector<std::uint64_t> t(tags);
    std::uint64_t s = seed_;
    for (auto x : t) s = derive_seed(s, {x});
    RandomStream rng(s);
    Eigen::VectorXd v(dim_);
    for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
    return v / std::sqrt(static_cast<double>(dim_));
  }

  std::uint64_t seed_;
  int dim_;
  double color_weight_;
  double frame_weight_;
  Eigen::MatrixXd rotation_;
};

/// Precomputed features: a JSON index plus a float32 blob holding
/// frames × dim values per stimulus, in index order.
class FileProvider : public Provider {
 public:
  static FileProvider load(const std::string& index_path) {
    const auto j = nlohmann::json::parse(io::read_text(index_path));
    FileProvider p;
    p.dim_ = j.at("dim").get<int>();
    p.frames_ = j.at("frames").get<int>();
    if (p.dim_ <= 0 || p.frames_ <= 0) throw io::FormatError("visual feature index: bad dim or frame count");
    std::string blob = j.at("blob").get<std::string>();
    const auto slash = index_path.find_last_of('/');
    if (!blob.empty() && blob[0] != '/' && slash != std::string::npos) blob = index_path.substr(0, slash + 1) + blob;
    const auto bytes = io::read_file(blob);
    const std::size_t per = static_cast<std::size_t>(p.dim_) * static_cast<std::size_t>(p.frames_);
    const auto& ids = j.at("stimulus_ids");
    if (bytes.size() != ids.size() * per * sizeof(float)) throw io::FormatError("visual feature blob size does not match index");
    p.data_.resize(ids.size() * per);
    std::memcpy(p.data_.data(), bytes.data(), bytes.size());
    for (std::size_t i = 0; i < ids.size(); ++i) p.offset_[ids[i].get<int>()] = i * per;
    return p;
  }

  /// Writes `index_path` and its blob (same stem, .f32).
  static void save(const std::string& index_path, int dim, int frames, const std::vector<int>& ids, const std::vector<float>& data) {
    if (data.size() != ids.size() * static_cast<std::size_t>(dim) * static_cast<std::size_t>(frames)) {
      throw std::invalid_argument("visual feature data size mismatch");
    }
    const auto slash = index_path.find_last_of('/');
    std::string stem = slash == std::string::npos ? index_path : index_path.substr(slash + 1);
    if (const auto dot = stem.rfind('.'); dot != std::string::npos) stem = stem.substr(0, dot);
    const std::string blob = stem + ".f32";
    const std::string dir = slash == std::string::npos ? "" : index_path.substr(0, slash + 1);
    io::write_file(dir + blob, {reinterpret_cast<const unsigned char*>(data.data()), data.size() * sizeof(float)});
    nlohmann::json j = {{"format", "neuro3d-visual-features"}, {"version", 1}, {"dim", dim}, {"frames", frames},
                        {"blob", blob}, {"stimulus_ids", ids}};
    io::write_text(index_path, j.dump(1) + "\n");
  }

  int dim() const override { return dim_; }
  int frames() const { return frames_; }

  Eigen::VectorXd frame_feature(const Stimulus& s, int slot, int /*frame*/) const override {
    const auto it = offset_.find(s.stimulus_id);
    if (it == offset_.end()) throw ProviderError("no precomputed features for stimulus " + std::to_string(s.stimulus_id));
    if (slot < 0 || slot >= frames_) throw ProviderError("frame slot outside the stored frames");
    const float* p = data_.data() + it->second + static_cast<std::size_t>(slot) * static_cast<std::size_t>(dim_);
    return Eigen::Map<const Eigen::VectorXf>(p, dim_).cast<double>();
  }

 private:
  int dim_ = 0;
  int frames_ = 0;
  std::vector<float> data_;
  std::map<int, std::size_t> offset_;
};

}  // namespace neuro3d::visual
