#include <gtest/gtest.h>

#include <filesystem>

#include "catw/ae/autoencoder.hpp"
#include "catw/nn/checkpoint.hpp"

using namespace catw;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("catw_ckpt_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d / name;
}

Autoencoder<float> small_ae(std::uint64_t seed) {
  Rng rng(seed);
  return Autoencoder<float>::create(AutoencoderConfig{16, 3, 4, 4, 4, true}, rng);
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  auto ae = small_ae(1);
  Rng rng(2);
  for (auto& p : ae.graph.params()) p.value() = Tensor<float>::randn(p.value().shape(), rng);
  auto path = scratch("rt.ckpt");
  ae.save(path);
  auto back = Autoencoder<float>::load(path);
  EXPECT_EQ(back.cfg, ae.cfg);
  ASSERT_EQ(back.graph.params().size(), ae.graph.params().size());
  for (std::size_t i = 0; i < ae.graph.params().size(); ++i) {
    EXPECT_EQ(back.graph.params()[i].name, ae.graph.params()[i].name);
    EXPECT_TRUE(back.graph.params()[i].value().bit_equal(ae.graph.params()[i].value()));
  }
}

TEST(Checkpoint, DoublePrecisionRoundTrip) {
  ModelGraph<double> g;
  Rng rng(3);
  g.add_param("a", Tensor<double>::randn({3, 5}, rng));
  g.add_param("b", Tensor<double>::randn({7}, rng));
  auto path = scratch("f64.ckpt");
  save_checkpoint(g, path);
  auto ck = load_checkpoint<double>(path);
  EXPECT_TRUE(ck.graph.param("a").value().bit_equal(g.param("a").value()));
  EXPECT_TRUE(ck.graph.param("b").value().bit_equal(g.param("b").value()));
}

TEST(Checkpoint, AdapterOnlyFileReproducesAdaptedOutputs) {
  auto ae = small_ae(4);
  auto adapted = ae;
  Rng rng(5);
  for (const auto& l : adapted.graph.layers())
    for (const auto& h : l.hosts) {
      auto [d, k] = adapted.graph.param(h).matrix_dims();
      auto& a = adapted.graph.attach_adapter(h, std::min<std::size_t>(2, std::min(d, k)), rng);
      a.up.value() = Tensor<float>::randn(a.up.value().shape(), rng, 0.05);
    }
  auto path = scratch("adapters.ckpt");
  adapted.save(path, CheckpointSections::adapters_only);

  auto restored = ae;
  load_adapters_into(restored.graph, path);
  Rng xr(6);
  auto x = Tensor<float>::uniform({2, 3, 16, 16}, xr, 0, 1);
  EXPECT_TRUE(restored.reconstruct(x).bit_equal(adapted.reconstruct(x)));
}

TEST(Checkpoint, AdapterHostShapeMismatchNamesHost) {
  auto ae = small_ae(7);
  auto adapted = ae;
  Rng rng(8);
  adapted.graph.attach_adapter("encoder.conv_in.weight", 2, rng);
  auto path = scratch("mismatch.ckpt");
  adapted.save(path, CheckpointSections::adapters_only);

  Rng r2(9);
  auto other = Autoencoder<float>::create(AutoencoderConfig{16, 3, 6, 4, 4, true}, r2);
  try {
    load_adapters_into(other.graph, path);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.conv_in.weight"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, BadMagicIsLoadError) {
  auto path = scratch("junk.ckpt");
  detail::write_file_atomic(path, "NOTACKPT and then some bytes");
  EXPECT_THROW(load_checkpoint<float>(path), LoadError);
}

TEST(Checkpoint, TruncatedFileIsLoadError) {
  auto ae = small_ae(10);
  auto path = scratch("trunc.ckpt");
  ae.save(path);
  auto bytes = detail::read_file(path);
  detail::write_file_atomic(path, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint<float>(path), LoadError);
}

TEST(Checkpoint, SavingTwiceGivesIdenticalBytes) {
  auto ae = small_ae(11);
  auto a = scratch("same1.ckpt"), b = scratch("same2.ckpt");
  ae.save(a);
  ae.save(b);
  EXPECT_EQ(detail::read_file(a), detail::read_file(b));
}
