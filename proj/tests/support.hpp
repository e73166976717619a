#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "epact/policy.hpp"
#include "epact/random.hpp"

namespace epact::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("epact_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Small network used for gradient checks: every block present, tiny sizes.
inline PolicyConfig miniature_config(Variant v) {
  PolicyConfig c;
  c.variant = v;
  c.width = 16;
  c.chunk = 4;
  c.image_width = 8;
  c.image_height = 8;
  c.heads = 2;
  c.ffn_dim = 32;
  c.backbone = {4, 8};
  c.latent_dim = 4;
  c.ik_hidden = 16;
  c.cvae_layers = 1;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  return c;
}

template <typename S>
struct SyntheticSample {
  PolicyInput<S> input;
  ChunkTarget<S> target;
  nn::RowVec<S> eps;
};

/// Seeded random input, target and CVAE noise matching `c`; the last target
/// row is marked as padding.
template <typename S>
SyntheticSample<S> synthetic_sample(const PolicyConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  auto fill = [&](Eigen::Index r, Eigen::Index k) {
    nn::Mat<S> m(r, k);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(u(rng));
    return m;
  };
  SyntheticSample<S> s;
  for (std::size_t i = 0; i < c.cameras.size(); ++i) s.input.images.push_back(fill(c.image_width * c.image_height, 3));
  s.input.q = fill(1, 4);
  s.target.actions = fill(c.chunk, 5) * S(4);
  s.target.end_poses = fill(c.chunk, 6) * S(4);
  s.target.pad.assign(std::size_t(c.chunk), false);
  s.target.pad.back() = true;
  s.eps = fill(1, c.latent_dim) * S(2);
  return s;
}

}  // namespace epact::testing
