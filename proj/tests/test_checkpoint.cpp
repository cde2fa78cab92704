#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "dwgl/checkpoint.hpp"
#include "dwgl/network.hpp"

using namespace dwgl;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::vector<unsigned char>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, LayoutOfASingleTensor) {
  const TensorMap m = {{"ab", Tensor(Shape{2}, std::vector<float>{1.0f, -2.0f})}};
  const auto bytes = encode_checkpoint(m);
  // magic, version, count, name length, name, rank, extent, payload.
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 + 2 + 1 + 4 + 8);
  EXPECT_EQ(std::memcmp(bytes.data(), "DWGL", 4), 0);
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 2);
  EXPECT_EQ(bytes[16], 1);
  EXPECT_EQ(bytes[17], 2);
  // 1.0f = 0x3F800000 little endian.
  EXPECT_EQ(bytes[21], 0x00);
  EXPECT_EQ(bytes[24], 0x3F);
}

TEST(Checkpoint, NetworkRoundTripsBitExactly) {
  NetworkConfig cfg;
  cfg.preset = "resnet-tiny-8";
  const NetworkGraph net = build(cfg, 11);
  TensorMap m(net.params.begin(), net.params.end());
  m.emplace("odd", Tensor(Shape{3}, std::vector<float>{-0.0f, 1e-45f, std::numeric_limits<float>::infinity()}));
  const auto bytes = encode_checkpoint(m);
  const TensorMap back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_TRUE(std::signbit(back.at("odd")[0]));

  const fs::path path = fs::temp_directory_path() / "dwgl-test-ckpt.dwgl";
  save_checkpoint(path, m);
  EXPECT_EQ(read_file_bytes(path), bytes);
  fs::remove(path);
}

TEST(Checkpoint, ScalarsAndEmptyMaps) {
  const TensorMap m = {{"s", Tensor::scalar(3.5f)}};
  EXPECT_EQ(decode_checkpoint(encode_checkpoint(m)).at("s")[0], 3.5f);
  EXPECT_TRUE(decode_checkpoint(encode_checkpoint({})).empty());
}

TEST(Checkpoint, BadMagic) {
  auto bytes = encode_checkpoint({});
  bytes[0] = 'X';
  EXPECT_NE(error_of(bytes).find("bad magic at byte offset 0"), std::string::npos);
}

TEST(Checkpoint, UnsupportedVersion) {
  auto bytes = encode_checkpoint({});
  bytes[4] = 2;
  EXPECT_NE(error_of(bytes).find("unsupported version 2"), std::string::npos);
}

TEST(Checkpoint, TruncationNamesTheOffset) {
  const auto full = encode_checkpoint({{"w", Tensor(Shape{2, 2})}});
  // Header 12, name length 2, name 1, rank 1, extents 8, payload 16.
  const std::vector<std::pair<std::size_t, std::string>> cuts = {
      {10, "count at byte offset 8"}, {13, "name length at byte offset 12"}, {15, "rank at byte offset 15"},
      {18, "extent at byte offset 16"}, {30, "payload at byte offset 28"}};
  for (const auto& [size, expected] : cuts) {
    const std::vector<unsigned char> cut(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(size));
    const std::string msg = error_of(cut);
    EXPECT_NE(msg.find(expected), std::string::npos) << size << ": " << msg;
  }
}

TEST(Checkpoint, TrailingBytesAndZeroExtent) {
  auto bytes = encode_checkpoint({{"w", Tensor(Shape{1})}});
  bytes.push_back(0);
  EXPECT_NE(error_of(bytes).find("trailing bytes at byte offset 24"), std::string::npos);

  auto zero = encode_checkpoint({{"w", Tensor(Shape{1})}});
  zero[16] = 0;
  EXPECT_NE(error_of(zero).find("zero extent at byte offset 16"), std::string::npos);
}

TEST(Checkpoint, FileErrorsNameThePath) {
  const fs::path path = fs::temp_directory_path() / "dwgl-test-bad.dwgl";
  write_file_bytes(path, {'D', 'W'});
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos);
  }
  fs::remove(path);
  EXPECT_THROW(load_checkpoint(path), Error);
}
