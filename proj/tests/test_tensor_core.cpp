#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "dualburst/container.hpp"
#include "dualburst/rng.hpp"
#include "dualburst/tensor.hpp"

namespace db = dualburst;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "dualburst_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint64_t> draws(db::RngStream s, std::size_t n) {
  std::vector<std::uint64_t> out(n);
  for (auto& v : out) v = s.next_u64();
  return out;
}

std::size_t positions_differing(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

db::AnyTensor random_tensor(db::RngStream& rng) {
  db::Shape shape(1 + rng.below(3));
  for (auto& d : shape) d = 1 + rng.below(6);
  const std::size_t n = db::shape_size(shape);
  switch (rng.below(3)) {
    case 0: {
      std::vector<float> v(n);
      for (auto& x : v) x = static_cast<float>(rng.normal() * 1e3);
      return db::TensorF(shape, v);
    }
    case 1: {
      std::vector<double> v(n);
      for (auto& x : v) x = rng.normal() * 1e-3;
      return db::TensorD(shape, v);
    }
    default: {
      std::vector<unsigned char> v(n);
      for (auto& x : v) x = static_cast<unsigned char>(rng.below(256));
      return db::TensorU8(shape, v);
    }
  }
}

}  // namespace

TEST(Tensor, RejectsDataLengthMismatchAndZeroDims) {
  EXPECT_THROW(db::TensorF({2, 3}, std::vector<float>(5)), db::DomainError);
  EXPECT_THROW(db::TensorF({2, 0}), db::DomainError);
}

TEST(Tensor, ElementwiseOpsMatchScalarLoopExactly) {
  auto rng = db::RngStream::root(11);
  std::vector<double> a(257), b(257);
  for (auto& v : a) v = rng.normal() * 3.0;
  for (auto& v : b) v = rng.normal() * 0.1;
  db::TensorD ta({257}, a), tb({257}, b);
  const auto sum = db::add(ta, tb);
  const auto prod = db::mul(ta, tb);
  const auto scaled = db::scale(ta, 0.37);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(sum[i], a[i] + b[i]);
    EXPECT_EQ(prod[i], a[i] * b[i]);
    EXPECT_EQ(scaled[i], a[i] * 0.37);
  }
  EXPECT_THROW(db::add(ta, db::TensorD({256})), db::DomainError);
}

TEST(Rng, DeriveStreamIsDeterministic) {
  const auto root = db::RngStream::root(42);
  EXPECT_EQ(draws(db::derive_stream(root, "shot", 0), 100), draws(db::derive_stream(root, "shot", 0), 100));
}

TEST(Rng, SiblingIndicesAreDistinct) {
  const auto root = db::RngStream::root(42);
  const auto a = draws(db::derive_stream(root, "shot", 0), 1000);
  const auto b = draws(db::derive_stream(root, "shot", 1), 1000);
  EXPECT_GT(positions_differing(a, b), 990u);
}

TEST(Rng, SiblingLabelsAreDistinct) {
  const auto root = db::RngStream::root(42);
  const auto a = draws(db::derive_stream(root, "shot", 7), 1000);
  const auto b = draws(db::derive_stream(root, "read", 7), 1000);
  EXPECT_GT(positions_differing(a, b), 990u);
}

TEST(Rng, DifferentRootSeedsDiffer) {
  EXPECT_GT(positions_differing(draws(db::RngStream::root(1), 1000), draws(db::RngStream::root(2), 1000)), 990u);
}

TEST(Rng, FrozenReferenceSequence) {
  // Guards cross-platform reproducibility: integer-only path, values frozen from this implementation.
  auto s = db::derive_stream(db::RngStream::root(2024), "frozen", 3);
  const auto first = s.next_u64();
  auto again = db::derive_stream(db::RngStream::root(2024), "frozen", 3);
  EXPECT_EQ(first, again.next_u64());
  EXPECT_EQ(db::detail::mix64(0), 0u);
  EXPECT_EQ(db::detail::mix64(1), 0x5692161D100B05E5ULL);
  EXPECT_EQ(db::detail::fnv1a64("a"), 0xAF63DC4C8601EC8CULL);
}

TEST(Rng, UniformMomentsAndRange) {
  auto s = db::RngStream::root(5);
  double sum = 0.0, sum2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sum2 += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.003);
  EXPECT_NEAR(sum2 / n - (sum / n) * (sum / n), 1.0 / 12.0, 0.002);
}

TEST(Rng, BelowStaysInRange) {
  auto s = db::RngStream::root(6);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[s.below(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(Container, EmptyRoundTrip) {
  const auto path = temp_file("empty.dbt");
  db::save_container(path, {});
  EXPECT_TRUE(db::load_container(path).empty());
}

TEST(Container, OnesRoundTripIsBitIdentical) {
  const auto path = temp_file("ones.dbt");
  db::Container c{{"x", db::TensorF({2, 3}, 1.0f)}};
  db::save_container(path, c);
  const auto back = db::load_container(path);
  EXPECT_EQ(back, c);
  EXPECT_EQ(db::encode_container(back), db::encode_container(c));
}

TEST(Container, ByteLayoutIsLittleEndianWithCount) {
  const auto bytes = db::encode_container({{"ab", db::TensorU8({2}, {7, 9})}});
  const std::vector<unsigned char> expected{'D', 'B', 'T', '1', 1, 0, 0, 0,  // magic, count
                                            2, 0, 0, 0, 'a', 'b',             // name
                                            2,                                // dtype u8
                                            1, 0, 0, 0, 2, 0, 0, 0,           // ndim, dims
                                            7, 9};
  EXPECT_EQ(bytes, expected);
}

TEST(Container, RandomContainersRoundTripBitExact) {
  auto rng = db::RngStream::root(99);
  for (int trial = 0; trial < 20; ++trial) {
    db::Container c;
    for (int k = 0; k < 10; ++k) c.emplace("t" + std::to_string(k), random_tensor(rng));
    const auto bytes = db::encode_container(c);
    const auto back = db::decode_container(bytes);
    ASSERT_EQ(back, c);
    ASSERT_EQ(db::encode_container(back), bytes);
  }
}

TEST(Container, BadMagicIsFormatError) {
  std::vector<unsigned char> bytes{'D', 'B', 'T', '2', 0, 0, 0, 0};
  EXPECT_THROW(db::decode_container(bytes), db::FormatError);
  EXPECT_THROW(db::decode_container({}), db::FormatError);
}

TEST(Container, UnknownDtypeIsFormatError) {
  auto bytes = db::encode_container({{"a", db::TensorU8({1}, {1})}});
  bytes[4 + 4 + 4 + 1] = 9;
  EXPECT_THROW(db::decode_container(bytes), db::FormatError);
}

TEST(Container, TruncationIsCorruptionError) {
  const auto bytes = db::encode_container({{"a", db::TensorD({3, 2}, 0.5)}, {"b", db::TensorF({4}, 2.0f)}});
  for (std::size_t cut = 4; cut < bytes.size(); cut += 3) {
    std::vector<unsigned char> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(db::decode_container(part), db::CorruptionError) << "cut at " << cut;
  }
}

TEST(Container, RejectsEmptyOrNonAsciiNames) {
  EXPECT_THROW(db::encode_container({{"", db::TensorF({1})}}), db::DomainError);
  EXPECT_THROW(db::encode_container({{"caf\xc3\xa9", db::TensorF({1})}}), db::DomainError);
}

TEST(Container, MissingFileIsIoError) {
  EXPECT_THROW(db::load_container(temp_file("does_not_exist.dbt")), db::IoError);
}
