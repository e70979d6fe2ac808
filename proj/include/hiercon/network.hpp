#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "hiercon/matrix.hpp"
#include "hiercon/taxonomy.hpp"

namespace hiercon {

enum class Activation : int { relu = 0, identity = 1 };

/// Network shapes: input D -> adapter hidden H -> shared S, and per level
/// shared S -> projector hidden Q -> projector out P.
struct ArchConfig {
  std::size_t input_dim = 512;
  std::size_t adapter_hidden = 512;
  std::size_t shared_dim = 256;
  std::size_t projector_hidden = 256;
  std::size_t projector_out = 128;
  Activation activation = Activation::relu;
};

/// Two affine layers with the activation applied between them.
struct MlpParams {
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;
};

/// Shared adapter plus one projector head per enabled level. `levels` lists
/// the enabled heads finest-first; the non-hierarchical configuration keeps
/// only the individual head.
struct EncoderParams {
  Activation activation = Activation::relu;
  MlpParams adapter;                  // D -> H -> S
  std::vector<Level> levels;          // enabled projector heads
  std::vector<MlpParams> projectors;  // parallel to `levels`, S -> Q -> P
};

/// Gradients with the same tensor layout as the parameters they refer to.
struct ParamGrads {
  MlpParams adapter;
  std::vector<MlpParams> projectors;
};

/// Visits every parameter tensor in the documented checkpoint order:
/// adapter w1, b1, w2, b2, then per enabled level (finest first) the
/// projector w1, c1, w2, c2.
template <typename Params, typename F>
void for_each_tensor(Params& params, F&& fn) {
  fn(params.adapter.w1.data);
  fn(params.adapter.b1);
  fn(params.adapter.w2.data);
  fn(params.adapter.b2);
  for (auto& proj : params.projectors) {
    fn(proj.w1.data);
    fn(proj.b1);
    fn(proj.w2.data);
    fn(proj.b2);
  }
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero. Deterministic
/// per seed. `levels` selects which projector heads exist.
EncoderParams init_params(const ArchConfig& cfg, std::uint64_t seed,
                          const std::vector<Level>& levels = {
                              Level::individual, Level::species, Level::taxon});

struct SharedCache {
  Matrix input;   // B x D
  Matrix pre1;    // B x H
  Matrix act1;    // B x H
  Matrix shared;  // B x S
};

struct ProjectorCache {
  Matrix pre1;                // B x Q
  Matrix act1;                // B x Q
  Matrix raw;                 // B x P, pre-normalization
  std::vector<double> norms;  // row norms of raw
  Matrix z;                   // B x P, row-normalized
};

inline constexpr double kNormEpsilon = 1e-12;

/// shared = act(X w1 + b1) w2 + b2
std::pair<Matrix, SharedCache> forward_shared(const EncoderParams& params,
                                              const Matrix& features);

/// z = raw / max(||raw||, eps) row-wise with raw = act(shared v1 + c1) v2 + c2.
/// Exact-zero raw rows stay zero instead of producing NaN.
std::pair<Matrix, ProjectorCache> forward_projector(const EncoderParams& params,
                                                    Level level,
                                                    const Matrix& shared);

/// Exact gradients of the scalar loss w.r.t. every parameter. `grad_z` holds
/// the loss gradient w.r.t. each projector's normalized output (parallel to
/// params.levels); `proj_caches` must come from the same forward pass as
/// `shared_cache`. `grad_shared_extra` optionally adds a direct gradient on
/// the shared output.
ParamGrads backward(const EncoderParams& params, const SharedCache& shared_cache,
                    const std::vector<ProjectorCache>& proj_caches,
                    const std::vector<Matrix>& grad_z,
                    const Matrix* grad_shared_extra = nullptr);

/// Adaptive-moment optimizer state with decoupled weight decay.
struct OptState {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  // first moments, checkpoint tensor order
  std::vector<std::vector<double>> v;  // second moments

  static OptState create(const EncoderParams& params, double lr,
                         double weight_decay, double beta1 = 0.9,
                         double beta2 = 0.999, double eps = 1e-8);
};

/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected;
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
void opt_step(EncoderParams& params, const ParamGrads& grads, OptState& state);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint: magic "HCONCKPT", version u32, ArchConfig fields and the
/// enabled-level mask as little-endian u32, parameter tensors as little-endian
/// f64 in for_each_tensor order, trailing CRC32 over all preceding bytes.
void save_checkpoint(const EncoderParams& params, const ArchConfig& cfg,
                     const std::filesystem::path& path);
std::pair<EncoderParams, ArchConfig> load_checkpoint(const std::filesystem::path& path);

/// In-memory codec used by the file functions; round-trips bit-exactly.
std::vector<std::uint8_t> encode_checkpoint(const EncoderParams& params,
                                            const ArchConfig& cfg);
std::pair<EncoderParams, ArchConfig> decode_checkpoint(
    const std::vector<std::uint8_t>& bytes);

}  // namespace hiercon
