#pragma once

// 64-channel 10-10 montage and the five-region partition used by the
// ablation tools. Channels 0-7 are the occipital/parieto-occipital sites
// that the synthetic generator treats as informative.

#include "json.hpp"

#include <array>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuro3d::montage {

inline constexpr std::size_t kChannels = 64;
inline constexpr std::size_t kInformative = 8;

inline const std::array<std::string, kChannels>& channel_names() {
  static const std::array<std::string, kChannels> names = {
      "O1",  "Oz",  "O2",  "PO7", "PO3", "POz", "PO4", "PO8",                                    //
      "Fp1", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8",                                           //
      "F7",  "F5",  "F3",  "F1",  "Fz",  "F2",  "F4",  "F6",  "F8",                              //
      "FT9", "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8", "FT10",              //
      "T7",  "C5",  "C3",  "C1",  "Cz",  "C2",  "C4",  "C6",  "T8",                              //
      "TP9", "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8", "TP10",              //
      "P7",  "P5",  "P3",  "P1",  "Pz",  "P2",  "P4",  "P6",  "P8"};
  return names;
}

inline std::size_t channel_index(const std::string& name) {
  const auto& names = channel_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  throw std::invalid_argument("unknown electrode " + name);
}

inline const std::vector<std::string>& region_names() {
  static const std::vector<std::string> r = {"frontal", "central", "parietal", "temporal", "occipital"};
  return r;
}

/// Region name -> channel indices.
using RegionMap = std::map<std::string, std::vector<std::size_t>>;

inline std::string region_of(const std::string& electrode) {
  auto starts = [&](const char* p) { return electrode.rfind(p, 0) == 0; };
  if (starts("PO") || starts("O")) return "occipital";
  if (starts("FT") || starts("TP") || starts("T")) return "temporal";
  if (starts("FC") || starts("CP") || starts("C")) return "central";
  if (starts("Fp") || starts("AF") || starts("F")) return "frontal";
  if (starts("P")) return "parietal";
  throw std::invalid_argument("cannot place electrode " + electrode);
}

inline RegionMap default_regions() {
  RegionMap m;
  for (const auto& r : region_names()) m[r];
  const auto& names = channel_names();
  for (std::size_t i = 0; i < names.size(); ++i) m[region_of(names[i])].push_back(i);
  return m;
}

/// Throws unless every channel in [0, channels) belongs to exactly one region.
inline void validate_partition(const RegionMap& m, std::size_t channels = kChannels) {
  std::vector<int> seen(channels, 0);
  for (const auto& [name, members] : m) {
    if (members.empty()) throw std::invalid_argument("region map: region '" + name + "' is empty");
    for (std::size_t c : members) {
      if (c >= channels) throw std::invalid_argument("region map: channel index " + std::to_string(c) + " out of range");
      if (seen[c]++) throw std::invalid_argument("region map: channel " + std::to_string(c) + " appears in more than one region");
    }
  }
  for (std::size_t c = 0; c < channels; ++c) {
    if (!seen[c]) throw std::invalid_argument("region map: channel " + std::to_string(c) + " belongs to no region");
  }
}

inline nlohmann::json regions_to_json(const RegionMap& m) {
  nlohmann::json j = nlohmann::json::object();
  const auto& names = channel_names();
  for (const auto& [region, members] : m) {
    auto& arr = j[region] = nlohmann::json::array();
    for (std::size_t c : members) arr.push_back(c < names.size() ? nlohmann::json(names[c]) : nlohmann::json(c));
  }
  return j;
}

/// Accepts electrode names or integer indices.
inline RegionMap regions_from_json(const nlohmann::json& j) {
  RegionMap m;
  for (const auto& [region, arr] : j.items()) {
    auto& members = m[region];
    for (const auto& e : arr) members.push_back(e.is_string() ? channel_index(e.get<std::string>()) : e.get<std::size_t>());
  }
  return m;
}

}  // namespace neuro3d::montage
