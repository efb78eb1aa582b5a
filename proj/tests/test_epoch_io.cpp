#include "neuro3d/epoch_io.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace {

using namespace neuro3d;

signal::EpochSet sample_epochs() {
  signal::EpochSet e;
  e.kind = signal::StimulusKind::Dynamic;
  e.rate = 250.0;
  e.channels = 3;
  e.samples = 5;
  e.labels = {{1, 2, 3, 0, 0}, {4, 5, 0, 1, -1}};
  for (int i = 0; i < 30; ++i) e.data.push_back(0.25f * static_cast<float>(i) - 3.0f);
  return e;
}

signal::RawRecording sample_raw() {
  signal::RawRecording r;
  r.rate = 1000.0;
  r.subject_id = 7;
  r.channels = 2;
  r.samples = 10;
  for (int i = 0; i < 20; ++i) r.data.push_back(static_cast<float>(i));
  r.events = {{2, 11, signal::StimulusKind::Static, 1, 2}, {6, 12, signal::StimulusKind::Dynamic, 3, 4}};
  return r;
}

TEST(EpochIo, RoundTripIsExact) {
  const auto e = sample_epochs();
  const auto bytes = io::encode_epochs(e);
  EXPECT_EQ(io::decode_epochs(bytes), e);
  EXPECT_EQ(io::encode_epochs(io::decode_epochs(bytes)), bytes);
}

TEST(EpochIo, HeaderLayout) {
  const auto bytes = io::encode_epochs(sample_epochs());
  ASSERT_GE(bytes.size(), 25u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "E3DE");
  std::uint32_t v[4];
  std::memcpy(v, bytes.data() + 4, 16);
  EXPECT_EQ(v[0], 1u);
  EXPECT_EQ(v[1], 2u);
  EXPECT_EQ(v[2], 3u);
  EXPECT_EQ(v[3], 5u);
  float rate;
  std::memcpy(&rate, bytes.data() + 20, 4);
  EXPECT_EQ(rate, 250.0f);
  EXPECT_EQ(bytes[24], 1);
  float first;
  std::memcpy(&first, bytes.data() + 25, 4);
  EXPECT_EQ(first, -3.0f);
}

TEST(EpochIo, TruncatedAndWrongMagicRejected) {
  auto bytes = io::encode_epochs(sample_epochs());
  auto cut = bytes;
  cut.resize(40);
  EXPECT_THROW(io::decode_epochs(cut), io::FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(io::decode_epochs(bytes), io::FormatError);
}

TEST(RawIo, RoundTrip) {
  const auto r = sample_raw();
  const auto back = io::decode_raw(io::encode_raw(r));
  EXPECT_EQ(back.data, r.data);
  EXPECT_EQ(back.subject_id, 7);
  ASSERT_EQ(back.events.size(), 2u);
  EXPECT_EQ(back.events[1].sample, 6u);
  EXPECT_EQ(back.events[1].kind, signal::StimulusKind::Dynamic);
  EXPECT_EQ(back.events[1].color_class, 4);
}

TEST(RawIo, EpochFileGivenToRawReaderIsExplained) {
  try {
    io::decode_raw(io::encode_epochs(sample_epochs()));
    FAIL() << "expected FormatError";
  } catch (const io::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("already an epoched"), std::string::npos);
  }
  EXPECT_THROW(io::decode_epochs(io::encode_raw(sample_raw())), io::FormatError);
}

TEST(RawIo, FileRoundTripAndChecksum) {
  const auto dir = std::filesystem::temp_directory_path() / "neuro3d_epoch_io_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "r.e3dr").string();
  io::write_raw(path, sample_raw());
  EXPECT_EQ(io::read_raw(path).data, sample_raw().data);
  const auto bytes = io::read_file(path);
  EXPECT_EQ(io::file_checksum(path), io::hex64(io::fnv1a64(bytes)));
  std::filesystem::remove_all(dir);
}

TEST(Checksum, FnvKnownVectors) {
  // Published FNV-1a 64 test vectors.
  const std::string empty, a = "a", foobar = "foobar";
  auto h = [](const std::string& s) {
    return io::fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  };
  EXPECT_EQ(h(empty), 0xcbf29ce484222325ull);
  EXPECT_EQ(h(a), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(h(foobar), 0x85944171f73967e8ull);
}

}  // namespace
