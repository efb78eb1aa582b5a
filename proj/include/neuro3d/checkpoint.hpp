#pragma once

// Checkpoints: a binary tensor file ("N3CK") plus a JSON sidecar holding the
// architecture, run configuration, counters and RNG state.

#include "neuro3d/autodiff.hpp"
#include "neuro3d/binary_io.hpp"
#include "neuro3d/nn.hpp"

#include "json.hpp"

#include <cstring>
#include <string>
#include <vector>

namespace neuro3d::ckpt {

using ad::Matrix;

inline constexpr char kMagic[4] = {'N', '3', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

struct Tensor {
  std::string name;
  Matrix<float> value;
  bool operator==(const Tensor&) const = default;
};

struct Checkpoint {
  std::string kind;  // "encoder", "decoder" or "color"
  long long step = 0;
  nlohmann::json architecture = nlohmann::json::object();
  nlohmann::json run_config = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  std::string rng_state;
  long long optimizer_steps = 0;
  std::vector<Tensor> params;
  std::vector<Tensor> moment1;
  std::vector<Tensor> moment2;

  const Tensor& param(const std::string& name) const {
    for (const auto& t : params) {
      if (t.name == name) return t;
    }
    throw std::out_of_range("checkpoint has no tensor " + name);
  }
};

namespace detail {

inline void put_str(io::ByteWriter& w, const std::string& s) {
  w.u32(static_cast<std::uint32_t>(s.size()));
  w.str(s);
}

inline std::string get_str(io::ByteReader& r) { return r.str(r.u32()); }

inline void put_tensors(io::ByteWriter& w, const std::vector<Tensor>& ts) {
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    put_str(w, t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rows()));
    w.u32(static_cast<std::uint32_t>(t.value.cols()));
    w.f32s({t.value.data(), static_cast<std::size_t>(t.value.size())});
  }
}

inline std::vector<Tensor> get_tensors(io::ByteReader& r) {
  std::vector<Tensor> ts(r.u32());
  for (auto& t : ts) {
    t.name = get_str(r);
    const auto rows = r.u32(), cols = r.u32();
    t.value.resize(rows, cols);
    r.f32s({t.value.data(), static_cast<std::size_t>(t.value.size())});
  }
  return ts;
}

}  // namespace detail

/// Binary layout: magic, u32 version, u64 step, str kind, three tensor
/// groups (parameters, first and second optimizer moments), u64 FNV-1a of
/// everything before it.
inline std::vector<unsigned char> encode_tensors(const Checkpoint& c) {
  io::ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  w.u64(static_cast<std::uint64_t>(c.step));
  detail::put_str(w, c.kind);
  detail::put_tensors(w, c.params);
  detail::put_tensors(w, c.moment1);
  detail::put_tensors(w, c.moment2);
  w.u64(io::fnv1a64(w.bytes()));
  return w.bytes();
}

inline nlohmann::json sidecar(const Checkpoint& c, const std::vector<unsigned char>& tensor_bytes) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& t : c.params) names.push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}});
  return {{"format", "neuro3d-checkpoint"}, {"version", kVersion},          {"kind", c.kind},
          {"step", c.step},                 {"architecture", c.architecture}, {"run_config", c.run_config},
          {"extra", c.extra},               {"rng_state", c.rng_state},       {"optimizer_steps", c.optimizer_steps},
          {"tensors", names},               {"tensor_file_fnv1a64", io::hex64(io::fnv1a64(tensor_bytes))}};
}

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

inline void save(const std::string& path, const Checkpoint& c) {
  const auto bytes = encode_tensors(c);
  io::write_file(path, bytes);
  io::write_text(sidecar_path(path), sidecar(c, bytes).dump(1) + "\n");
}

inline Checkpoint load(const std::string& path) {
  std::vector<unsigned char> bytes;
  try {
    bytes = io::read_file(path);
  } catch (const std::exception&) {
    throw std::runtime_error("checkpoint not found: " + path + " (run the corresponding train command first)");
  }
  if (bytes.size() < 16) throw io::FormatError("checkpoint " + path + " is truncated");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  const std::vector<unsigned char> body(bytes.begin(), bytes.end() - 8);
  io::ByteReader r(body);
  if (r.str(4) != std::string(kMagic, 4)) throw io::FormatError(path + " is not an N3CK checkpoint");
  if (stored != io::fnv1a64(body)) throw io::FormatError("checkpoint " + path + " failed its checksum");
  if (r.u32() != kVersion) throw io::FormatError("unsupported checkpoint version in " + path);
  Checkpoint c;
  c.step = static_cast<long long>(r.u64());
  c.kind = detail::get_str(r);
  c.params = detail::get_tensors(r);
  c.moment1 = detail::get_tensors(r);
  c.moment2 = detail::get_tensors(r);
  if (r.remaining() != 0) throw io::FormatError("trailing bytes in checkpoint " + path);

  const auto side = nlohmann::json::parse(io::read_text(sidecar_path(path)));
  if (side.at("format") != "neuro3d-checkpoint") throw io::FormatError("bad checkpoint sidecar for " + path);
  if (side.at("tensor_file_fnv1a64").get<std::string>() != io::hex64(io::fnv1a64(bytes))) {
    throw io::FormatError("checkpoint sidecar does not match tensor file " + path);
  }
  if (side.at("kind").get<std::string>() != c.kind || side.at("step").get<long long>() != c.step) {
    throw io::FormatError("checkpoint sidecar disagrees with tensor file " + path);
  }
  c.architecture = side.at("architecture");
  c.run_config = side.at("run_config");
  c.extra = side.at("extra");
  c.rng_state = side.at("rng_state").get<std::string>();
  c.optimizer_steps = side.at("optimizer_steps").get<long long>();
  return c;
}

/// Copies parameter values (and optimizer moments when given) into `c`.
template <typename T>
void capture(Checkpoint& c, const nn::ParameterSet<T>& ps, const nn::AdamW<T>* opt = nullptr) {
  c.params.clear();
  c.moment1.clear();
  c.moment2.clear();
  for (const auto& p : ps) c.params.push_back({p.name, p.var.value().template cast<float>()});
  if (opt) {
    c.optimizer_steps = opt->steps();
    for (const auto& [name, m] : opt->moments()) {
      c.moment1.push_back({name, m.m.template cast<float>()});
      c.moment2.push_back({name, m.v.template cast<float>()});
    }
  }
}

/// Loads parameter values by name; every parameter must be present with the
/// same shape, and the checkpoint may not carry unknown tensors.
template <typename T>
void restore(const Checkpoint& c, nn::ParameterSet<T>& ps, nn::AdamW<T>* opt = nullptr) {
  if (c.params.size() != ps.size()) {
    throw std::runtime_error(c.kind + " checkpoint holds " + std::to_string(c.params.size()) + " tensors, model expects " +
                             std::to_string(ps.size()));
  }
  for (auto& p : ps) {
    const auto& t = c.param(p.name);
    if (t.value.rows() != p.var.rows() || t.value.cols() != p.var.cols()) throw std::runtime_error("shape mismatch for tensor " + p.name);
    p.var.mutable_value() = t.value.template cast<T>();
  }
  if (opt) {
    opt->set_steps(c.optimizer_steps);
    auto& mom = opt->moments();
    mom.clear();
    for (std::size_t i = 0; i < c.moment1.size(); ++i) {
      mom[c.moment1[i].name] = {c.moment1[i].value.template cast<T>(), c.moment2.at(i).value.template cast<T>()};
    }
  }
}

}  // namespace neuro3d::ckpt
