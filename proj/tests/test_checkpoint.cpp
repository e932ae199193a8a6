#include <gtest/gtest.h>

#include <sstream>

#include "impervia/checkpoint.hpp"

using namespace impervia;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig c;
  c.depth = 2;
  c.base_channels = 4;
  c.gn_groups = 2;
  c.embed_dim = 8;
  c.n_cond = 3;
  c.input_side = 8;
  return c;
}

Checkpoint<float> sample_checkpoint(std::uint64_t seed) {
  Denoiser<float> m(tiny());
  m.randomize(seed);
  Checkpoint<float> ck{tiny(), m.params(), m.params()};
  for (auto& t : ck.ema.tensors)
    for (auto& v : t.data) v *= 0.5f;
  return ck;
}

std::string bytes_of(const Checkpoint<float>& ck) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, ck);
  return os.str();
}

Checkpoint<float> parse(const std::string& s) {
  std::istringstream is(s, std::ios::binary);
  return read_checkpoint<float>(is);
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto ck = sample_checkpoint(3);
  const auto back = parse(bytes_of(ck));
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.params.names, ck.params.names);
  EXPECT_EQ(back.params.tensors, ck.params.tensors);
  EXPECT_EQ(back.ema.tensors, ck.ema.tensors);
}

TEST(Checkpoint, RewriteIsByteIdentical) {
  const auto s = bytes_of(sample_checkpoint(5));
  EXPECT_EQ(bytes_of(parse(s)), s);
}

TEST(Checkpoint, DoubleModelStoresFloatBodies) {
  Denoiser<double> m(tiny());
  m.randomize(9);
  Checkpoint<double> ck{tiny(), m.params(), m.params()};
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_checkpoint(ss, ck);
  const auto back = read_checkpoint<double>(ss);
  for (std::size_t p = 0; p < ck.params.size(); ++p)
    for (std::size_t i = 0; i < ck.params.tensors[p].numel(); ++i)
      ASSERT_EQ(back.params.tensors[p][i], static_cast<double>(static_cast<float>(ck.params.tensors[p][i])));
}

TEST(Checkpoint, HeaderLayout) {
  const auto s = bytes_of(sample_checkpoint(1));
  EXPECT_EQ(s.substr(0, 4), "IDNP");
  EXPECT_EQ(static_cast<unsigned char>(s[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(s[5]), 0);
  const auto digest = sha256(tiny().canonical());
  EXPECT_EQ(s.substr(6, 32), std::string(reinterpret_cast<const char*>(digest.data()), 32));
}

TEST(Checkpoint, BadMagicIsFormatError) {
  auto s = bytes_of(sample_checkpoint(1));
  s[0] = 'X';
  EXPECT_THROW(parse(s), FormatError);
}

TEST(Checkpoint, BadVersionIsFormatError) {
  auto s = bytes_of(sample_checkpoint(1));
  s[4] = 2;
  EXPECT_THROW(parse(s), FormatError);
}

TEST(Checkpoint, TamperedConfigIsSchemaError) {
  auto s = bytes_of(sample_checkpoint(1));
  const auto pos = s.find("depth=2");
  ASSERT_NE(pos, std::string::npos);
  s[pos + 6] = '3';
  EXPECT_THROW(parse(s), SchemaError);
}

TEST(Checkpoint, TamperedDigestIsSchemaError) {
  auto s = bytes_of(sample_checkpoint(1));
  s[10] ^= 0x5a;
  EXPECT_THROW(parse(s), SchemaError);
}

TEST(Checkpoint, TopologyMismatchIsSchemaError) {
  auto ck = sample_checkpoint(1);
  ck.config.depth = 1;
  EXPECT_THROW(parse(bytes_of(ck)), SchemaError);
  auto ck2 = sample_checkpoint(1);
  ck2.params.tensors[0].shape.back() += 1;
  ck2.params.tensors[0].data.resize(nn::Tensor<float>::count(ck2.params.tensors[0].shape));
  EXPECT_THROW(parse(bytes_of(ck2)), SchemaError);
}

TEST(Checkpoint, EveryTruncationIsIoError) {
  const auto s = bytes_of(sample_checkpoint(1));
  for (std::size_t n = 0; n < s.size(); n += 1 + n / 16) {
    SCOPED_TRACE(n);
    EXPECT_THROW(parse(s.substr(0, n)), IoError);
  }
  EXPECT_THROW(parse(s.substr(0, s.size() - 1)), IoError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = ::testing::TempDir() + "ck.idnp";
  const auto ck = sample_checkpoint(2);
  save_checkpoint(ck, path);
  EXPECT_EQ(load_checkpoint<float>(path).params.tensors, ck.params.tensors);
  EXPECT_THROW(load_checkpoint<float>(path + ".missing"), IoError);
}

TEST(Checkpoint, LossCsv) {
  std::ostringstream os;
  write_loss_csv(os, {1.5, 0.25});
  EXPECT_EQ(os.str(), "step,loss\n0,1.5\n1,0.25\n");
}
