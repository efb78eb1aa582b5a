#pragma once

// Epoch container (.e3de) and raw recording (.e3dr) files. Byte layouts are
// described in docs/formats.md.

#include "neuro3d/binary_io.hpp"
#include "neuro3d/signal.hpp"

#include "json.hpp"

#include <string>

namespace neuro3d::io {

inline constexpr char kEpochMagic[4] = {'E', '3', 'D', 'E'};
inline constexpr char kRawMagic[4] = {'E', '3', 'D', 'R'};
inline constexpr std::uint32_t kEpochVersion = 1;
inline constexpr std::uint32_t kRawVersion = 1;

inline nlohmann::json labels_to_json(const std::vector<signal::TrialLabel>& labels) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : labels) {
    arr.push_back({{"stimulus_id", l.stimulus_id},
                   {"object_class", l.object_class},
                   {"color_class", l.color_class},
                   {"subject_id", l.subject_id},
                   {"repetition", l.repetition}});
  }
  return arr;
}

inline std::vector<signal::TrialLabel> labels_from_json(const nlohmann::json& arr) {
  std::vector<signal::TrialLabel> out;
  for (const auto& j : arr) {
    out.push_back({j.at("stimulus_id").get<int>(), j.at("object_class").get<int>(), j.at("color_class").get<int>(),
                   j.at("subject_id").get<int>(), j.at("repetition").get<int>()});
  }
  return out;
}

inline std::vector<unsigned char> encode_epochs(const signal::EpochSet& e) {
  e.validate();
  ByteWriter w;
  w.raw(kEpochMagic, 4);
  w.u32(kEpochVersion);
  w.u32(static_cast<std::uint32_t>(e.trials()));
  w.u32(static_cast<std::uint32_t>(e.channels));
  w.u32(static_cast<std::uint32_t>(e.samples));
  w.f32(static_cast<float>(e.rate));
  w.u8(static_cast<std::uint8_t>(e.kind));
  w.f32s(e.data);
  const std::string labels = nlohmann::json{{"labels", labels_to_json(e.labels)}}.dump();
  w.u32(static_cast<std::uint32_t>(labels.size()));
  w.str(labels);
  return w.bytes();
}

inline signal::EpochSet decode_epochs(std::vector<unsigned char> bytes) {
  ByteReader r(std::move(bytes));
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kRawMagic, 4) == 0) throw FormatError("file is a raw recording (E3DR), not an epoch container");
  if (std::memcmp(magic, kEpochMagic, 4) != 0) throw FormatError("bad magic: not an E3DE epoch container");
  const auto version = r.u32();
  if (version != kEpochVersion) throw FormatError("unsupported E3DE version " + std::to_string(version));
  signal::EpochSet e;
  const auto trials = r.u32();
  e.channels = r.u32();
  e.samples = r.u32();
  e.rate = r.f32();
  const auto kind = r.u8();
  if (kind > 1) throw FormatError("bad stimulus kind byte");
  e.kind = static_cast<signal::StimulusKind>(kind);
  e.data.resize(static_cast<std::size_t>(trials) * e.channels * e.samples);
  r.f32s(e.data);
  const auto len = r.u32();
  const auto j = nlohmann::json::parse(r.str(len));
  e.labels = labels_from_json(j.at("labels"));
  if (e.labels.size() != trials) throw FormatError("label block length does not match trial count");
  return e;
}

inline void write_epochs(const std::string& path, const signal::EpochSet& e) { write_file(path, encode_epochs(e)); }
inline signal::EpochSet read_epochs(const std::string& path) { return decode_epochs(read_file(path)); }

inline std::vector<unsigned char> encode_raw(const signal::RawRecording& rec) {
  rec.validate();
  ByteWriter w;
  w.raw(kRawMagic, 4);
  w.u32(kRawVersion);
  w.u32(static_cast<std::uint32_t>(rec.channels));
  w.u32(static_cast<std::uint32_t>(rec.samples));
  w.f32(static_cast<float>(rec.rate));
  w.u32(static_cast<std::uint32_t>(rec.subject_id));
  w.f32s(rec.data);
  nlohmann::json events = nlohmann::json::array();
  for (const auto& ev : rec.events) {
    events.push_back({{"sample", ev.sample},
                      {"stimulus_id", ev.stimulus_id},
                      {"kind", signal::to_string(ev.kind)},
                      {"object_class", ev.object_class},
                      {"color_class", ev.color_class}});
  }
  const std::string js = nlohmann::json{{"events", events}}.dump();
  w.u32(static_cast<std::uint32_t>(js.size()));
  w.str(js);
  return w.bytes();
}

inline signal::RawRecording decode_raw(std::vector<unsigned char> bytes) {
  ByteReader r(std::move(bytes));
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kEpochMagic, 4) == 0) {
    throw FormatError("input is already an epoched (preprocessed) E3DE container; preprocess expects a raw E3DR recording");
  }
  if (std::memcmp(magic, kRawMagic, 4) != 0) throw FormatError("bad magic: not an E3DR raw recording");
  const auto version = r.u32();
  if (version != kRawVersion) throw FormatError("unsupported E3DR version " + std::to_string(version));
  signal::RawRecording rec;
  rec.channels = r.u32();
  rec.samples = r.u32();
  rec.rate = r.f32();
  rec.subject_id = static_cast<int>(r.u32());
  rec.data.resize(rec.channels * rec.samples);
  r.f32s(rec.data);
  const auto len = r.u32();
  const auto j = nlohmann::json::parse(r.str(len));
  for (const auto& ev : j.at("events")) {
    const std::string kind = ev.at("kind").get<std::string>();
    if (kind != "static" && kind != "dynamic") throw FormatError("bad event kind " + kind);
    rec.events.push_back({ev.at("sample").get<std::size_t>(), ev.at("stimulus_id").get<int>(),
                          kind == "static" ? signal::StimulusKind::Static : signal::StimulusKind::Dynamic,
                          ev.at("object_class").get<int>(), ev.at("color_class").get<int>()});
  }
  rec.validate();
  return rec;
}

inline void write_raw(const std::string& path, const signal::RawRecording& rec) { write_file(path, encode_raw(rec)); }
inline signal::RawRecording read_raw(const std::string& path) { return decode_raw(read_file(path)); }

}  // namespace neuro3d::io
