#include "rmroute/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "testutil.hpp"

using namespace rmroute;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.meta.config_hash = 0xdeadbeefcafef00dull;
  ck.meta.seed = 1234;
  ck.meta.method = "rodos";
  ck.meta.extra["domain"] = "alpha";
  ck.meta.extra["vocab"] = "pad\nunk\nsep\nhello";
  Rng r(5);
  ck.tensors["embed.table"] = make_tensor({4, 3});
  ck.tensors["head.weight"] = make_tensor({1, 3});
  ck.tensors["head.bias"] = make_tensor({1});
  for (auto& [name, t] : ck.tensors)
    for (auto& v : t->data) v = static_cast<float>(r.normal());
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  testutil::TempDir tmp;
  auto ck = sample_checkpoint();
  const auto path = tmp.file("model.ckpt");
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);
  EXPECT_EQ(back.meta.config_hash, ck.meta.config_hash);
  EXPECT_EQ(back.meta.seed, ck.meta.seed);
  EXPECT_EQ(back.meta.method, ck.meta.method);
  EXPECT_EQ(back.meta.extra, ck.meta.extra);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    ASSERT_TRUE(back.tensors.count(name)) << name;
    const auto& u = back.tensors.at(name);
    EXPECT_EQ(u->shape, t->shape) << name;
    ASSERT_EQ(u->data.size(), t->data.size()) << name;
    // bitwise, not approximate
    EXPECT_EQ(0, std::memcmp(u->data.data(), t->data.data(), t->data.size() * 4)) << name;
    EXPECT_FALSE(u->requires_grad);
  }
}

TEST(Checkpoint, SameContentsSameBytes) {
  testutil::TempDir tmp;
  auto ck = sample_checkpoint();
  save_checkpoint(tmp.file("a.ckpt"), ck);
  save_checkpoint(tmp.file("b.ckpt"), ck);
  EXPECT_EQ(file_hash(tmp.file("a.ckpt")), file_hash(tmp.file("b.ckpt")));
  // and a re-save of the loaded copy is byte-identical too
  auto back = load_checkpoint(tmp.file("a.ckpt"));
  save_checkpoint(tmp.file("c.ckpt"), back);
  EXPECT_EQ(file_hash(tmp.file("a.ckpt")), file_hash(tmp.file("c.ckpt")));
}

TEST(Checkpoint, DifferentContentsDifferentBytes) {
  testutil::TempDir tmp;
  auto ck = sample_checkpoint();
  save_checkpoint(tmp.file("a.ckpt"), ck);
  ck.tensors["head.bias"]->data[0] += 1e-7f;
  save_checkpoint(tmp.file("b.ckpt"), ck);
  EXPECT_NE(file_hash(tmp.file("a.ckpt")), file_hash(tmp.file("b.ckpt")));
}

TEST(Checkpoint, CorruptionIsDetected) {
  testutil::TempDir tmp;
  auto ck = sample_checkpoint();
  const auto path = tmp.file("model.ckpt");
  save_checkpoint(path, ck);
  // flip one payload byte near the end of the file (inside the last tensor)
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(-12, std::ios::end);
    char b;
    f.seekg(-12, std::ios::end);
    f.get(b);
    f.seekp(-12, std::ios::end);
    b = static_cast<char>(b ^ 0x40);
    f.put(b);
  }
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, TruncationIsDetected) {
  testutil::TempDir tmp;
  auto ck = sample_checkpoint();
  const auto path = tmp.file("model.ckpt");
  save_checkpoint(path, ck);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 16);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, BadMagicAndMissingFileAreErrors) {
  testutil::TempDir tmp;
  EXPECT_THROW(load_checkpoint(tmp.file("nope.ckpt")), std::runtime_error);
  const auto path = tmp.file("junk.ckpt");
  std::ofstream(path, std::ios::binary) << "this is not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, EmptyTensorSetStillRoundTrips) {
  testutil::TempDir tmp;
  Checkpoint ck;
  ck.meta.method = "baseline";
  const auto path = tmp.file("empty.ckpt");
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);
  EXPECT_EQ(back.meta.method, "baseline");
  EXPECT_TRUE(back.tensors.empty());
}
