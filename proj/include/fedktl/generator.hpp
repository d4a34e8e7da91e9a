#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>

#include "fedktl/binary_io.hpp"
#include "fedktl/module.hpp"
#include "fedktl/rng.hpp"
#include "fedktl/tensor.hpp"

namespace fedktl {

/// A pre-trained generator stand-in: mapping network (noise -> W) and
/// synthesis network (W -> image). Both are frozen at construction.
template <Real T>
class FrozenGenerator {
 public:
  FrozenGenerator(std::size_t noise_dim, std::size_t latent_dim, std::size_t image_dim, std::uint64_t seed)
      : noise_dim_(noise_dim),
        latent_dim_(latent_dim),
        image_dim_(image_dim),
        mapping_("generator.mapping", noise_dim,
                 {layer::Dense{noise_dim, latent_dim}, layer::Tanh{}, layer::Dense{latent_dim, latent_dim}}, seed),
        synthesis_("generator.synthesis", latent_dim,
                   {layer::Dense{latent_dim, 2 * image_dim}, layer::Tanh{}, layer::Dense{2 * image_dim, image_dim},
                    layer::Tanh{}},
                   seed) {
    mapping_.freeze();
    synthesis_.freeze();
  }

  std::size_t noise_dim() const { return noise_dim_; }
  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t image_dim() const { return image_dim_; }
  const Module<T>& mapping() const { return mapping_; }
  const Module<T>& synthesis() const { return synthesis_; }

  std::uint64_t state_hash() const { return detail::mix64(mapping_.state_hash() ^ (synthesis_.state_hash() << 1)); }

  /// `count` standard-normal noise vectors from the stream `key`.
  Tensor<T> sample_noise(std::size_t count, std::uint64_t key) const {
    Rng rng(key);
    Tensor<T> eps(Shape{count, noise_dim_});
    for (auto& v : eps.data()) v = static_cast<T>(rng.normal());
    return eps;
  }

  /// w = G_m(eps): `count` samples from the valid latent domain W.
  Tensor<T> sample_latents(std::size_t count, std::uint64_t key) const {
    if (count == 0) return Tensor<T>(Shape{0, latent_dim_});
    return mapping_.infer(sample_noise(count, key));
  }

  /// I = G_s(w), one image per latent row.
  Tensor<T> synthesize(const Tensor<T>& latents) const {
    detail::require_shape(latents.cols() == latent_dim_, "synthesize: latent dimension " +
                                                             std::to_string(latents.cols()) + " != H=" +
                                                             std::to_string(latent_dim_));
    if (latents.rows() == 0) return Tensor<T>(Shape{0, image_dim_});
    return synthesis_.infer(latents);
  }

 private:
  std::size_t noise_dim_, latent_dim_, image_dim_;
  Module<T> mapping_;
  Module<T> synthesis_;
};

// ---------------------------------------------------------------------------
// Bridge files for substituting an external generator.
//   latents: "KTLW" | u32 version | u64 count | u64 H     | f32[count*H]
//   images:  "KTLI" | u32 version | u64 count | u64 d_img | f32[count*d_img]

inline constexpr std::uint32_t kBridgeFormatVersion = 1;

namespace detail {

template <Real T>
void write_matrix_file(const std::filesystem::path& path, std::string_view magic, const Tensor<T>& m) {
  io::ByteWriter w;
  w.magic(magic);
  w.u32(kBridgeFormatVersion);
  w.u64(m.rows());
  w.u64(m.cols());
  for (T v : m.data()) w.f32(static_cast<float>(v));
  w.save(path);
}

template <Real T>
Tensor<T> read_matrix_file(const std::filesystem::path& path, std::string_view magic,
                           std::optional<std::size_t> expected_cols, const char* dim_name) {
  auto r = io::ByteReader::load(path);
  r.expect_magic(magic);
  if (const auto v = r.u32(); v != kBridgeFormatVersion)
    throw FormatError(std::string(magic) + ": unsupported version " + std::to_string(v));
  const std::uint64_t count = r.u64();
  const std::uint64_t cols = r.u64();
  if (expected_cols && cols != *expected_cols)
    throw FormatError(std::string(magic) + ": " + dim_name + "=" + std::to_string(cols) + " does not match expected " +
                      std::to_string(*expected_cols));
  if (cols != 0 && count > (std::uint64_t{1} << 40) / cols) throw FormatError("truncated file: implausible size");
  r.need(count * cols * 4, "payload");
  Tensor<T> m(Shape{count, cols});
  for (auto& v : m.data()) v = static_cast<T>(r.f32());
  r.expect_end();
  return m;
}

}  // namespace detail

template <Real T>
void write_latent_file(const std::filesystem::path& path, const Tensor<T>& latents) {
  detail::write_matrix_file(path, "KTLW", latents);
}

template <Real T>
Tensor<T> read_latent_file(const std::filesystem::path& path, std::optional<std::size_t> expected_h = std::nullopt) {
  return detail::read_matrix_file<T>(path, "KTLW", expected_h, "H");
}

template <Real T>
void write_image_file(const std::filesystem::path& path, const Tensor<T>& images) {
  detail::write_matrix_file(path, "KTLI", images);
}

template <Real T>
Tensor<T> read_image_file(const std::filesystem::path& path, std::optional<std::size_t> expected_d = std::nullopt) {
  return detail::read_matrix_file<T>(path, "KTLI", expected_d, "d_img");
}

/// Round-trip through an external generator: latents are exported as
/// `latents_<round>.ktlw` and the matching `images_<round>.ktli` is imported
/// once it appears.
class GeneratorBridge {
 public:
  GeneratorBridge(std::filesystem::path dir, std::size_t latent_dim, std::size_t image_dim,
                  std::chrono::milliseconds timeout = std::chrono::seconds(600))
      : dir_(std::move(dir)), latent_dim_(latent_dim), image_dim_(image_dim), timeout_(timeout) {
    std::filesystem::create_directories(dir_);
  }

  std::filesystem::path latent_path(std::size_t round) const {
    return dir_ / ("latents_" + std::to_string(round) + ".ktlw");
  }
  std::filesystem::path image_path(std::size_t round) const {
    return dir_ / ("images_" + std::to_string(round) + ".ktli");
  }

  template <Real T>
  void export_latents(const Tensor<T>& latents, std::size_t round) {
    detail::require_shape(latents.cols() == latent_dim_, "bridge export: latent dimension mismatch");
    write_latent_file(latent_path(round), latents);
    exported_ = latents.rows();
  }

  /// Waits up to the timeout for the image file of `round`, then validates
  /// it against the preceding export.
  template <Real T>
  Tensor<T> import_images(std::size_t round) const {
    if (!exported_) throw FormatError("bridge import without a preceding export");
    const auto path = image_path(round);
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    while (!std::filesystem::exists(path)) {
      if (std::chrono::steady_clock::now() >= deadline)
        throw FormatError("bridge: timed out waiting for " + path.string());
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    auto images = read_image_file<T>(path, image_dim_);
    if (images.rows() != *exported_)
      throw FormatError("bridge: image count " + std::to_string(images.rows()) + " does not match exported count " +
                        std::to_string(*exported_));
    return images;
  }

 private:
  std::filesystem::path dir_;
  std::size_t latent_dim_, image_dim_;
  std::chrono::milliseconds timeout_;
  std::optional<std::size_t> exported_;
};

/// Serves one bridge request with an in-process generator: reads the latent
/// file of `round` and writes the corresponding image file.
template <Real T>
void respond_to_bridge(const FrozenGenerator<T>& gen, const GeneratorBridge& bridge, std::size_t round) {
  const auto latents = read_latent_file<T>(bridge.latent_path(round), gen.latent_dim());
  write_image_file(bridge.image_path(round), gen.synthesize(latents));
}

}  // namespace fedktl
