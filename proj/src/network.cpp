#include "hiercon/network.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hiercon/rng.hpp"

namespace hiercon {

namespace {

double activate(Activation act, double x) {
  return act == Activation::relu ? (x > 0.0 ? x : 0.0) : x;
}

double activate_grad(Activation act, double pre) {
  return act == Activation::relu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0;
}

Matrix affine(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out = matmul(x, w);
  for (std::size_t i = 0; i < out.rows; ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < out.cols; ++j) row[j] += b[j];
  }
  return out;
}

Matrix apply_activation(Activation act, const Matrix& pre) {
  Matrix out = pre;
  for (auto& v : out.data) v = activate(act, v);
  return out;
}

std::vector<double> column_sums(const Matrix& m) {
  std::vector<double> sums(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) sums[j] += row[j];
  }
  return sums;
}

MlpParams init_mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  MlpParams p;
  p.w1 = Matrix(in, hidden);
  const double a1 = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& w : p.w1.data) w = rng.uniform_symmetric(a1);
  p.b1.assign(hidden, 0.0);
  p.w2 = Matrix(hidden, out);
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (auto& w : p.w2.data) w = rng.uniform_symmetric(a2);
  p.b2.assign(out, 0.0);
  return p;
}

MlpParams zeros_like(const MlpParams& p) {
  MlpParams g;
  g.w1 = Matrix(p.w1.rows, p.w1.cols);
  g.b1.assign(p.b1.size(), 0.0);
  g.w2 = Matrix(p.w2.rows, p.w2.cols);
  g.b2.assign(p.b2.size(), 0.0);
  return g;
}

// Backprop through one two-layer block: given dL/d(output), accumulates the
// block's parameter gradients and returns dL/d(input).
Matrix backward_mlp(Activation act, const Matrix& input, const Matrix& pre1,
                    const Matrix& act1, const MlpParams& params,
                    const Matrix& grad_out, MlpParams& grads) {
  Matrix gw2 = matmul_at_b(act1, grad_out);
  for (std::size_t i = 0; i < gw2.data.size(); ++i) grads.w2.data[i] += gw2.data[i];
  const auto gb2 = column_sums(grad_out);
  for (std::size_t j = 0; j < gb2.size(); ++j) grads.b2[j] += gb2[j];

  Matrix grad_act1 = matmul_a_bt(grad_out, params.w2);
  for (std::size_t i = 0; i < grad_act1.data.size(); ++i) {
    grad_act1.data[i] *= activate_grad(act, pre1.data[i]);
  }

  Matrix gw1 = matmul_at_b(input, grad_act1);
  for (std::size_t i = 0; i < gw1.data.size(); ++i) grads.w1.data[i] += gw1.data[i];
  const auto gb1 = column_sums(grad_act1);
  for (std::size_t j = 0; j < gb1.size(); ++j) grads.b1[j] += gb1[j];

  return matmul_a_bt(grad_act1, params.w1);
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  if (pos + 4 > bytes.size()) throw CorruptCheckpoint("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

void append_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double read_f64(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  if (pos + 8 > bytes.size()) throw CorruptCheckpoint("checkpoint truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
  pos += 8;
  return std::bit_cast<double>(bits);
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i) {
    crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

constexpr char kMagic[8] = {'H', 'C', 'O', 'N', 'C', 'K', 'P', 'T'};

}  // namespace

EncoderParams init_params(const ArchConfig& cfg, std::uint64_t seed,
                          const std::vector<Level>& levels) {
  if (cfg.input_dim < 1 || cfg.adapter_hidden < 1 || cfg.shared_dim < 1 ||
      cfg.projector_hidden < 1 || cfg.projector_out < 1) {
    throw InvalidConfig("all architecture dimensions must be >= 1");
  }
  if (levels.empty()) throw InvalidConfig("at least one projector level required");

  Rng rng(seed);
  EncoderParams params;
  params.activation = cfg.activation;
  params.adapter = init_mlp(cfg.input_dim, cfg.adapter_hidden, cfg.shared_dim, rng);
  // Heads are always drawn in finest-to-coarsest order so a subset
  // configuration shares its draws with the full one.
  for (Level level : kAllLevels) {
    if (std::find(levels.begin(), levels.end(), level) == levels.end()) continue;
    params.levels.push_back(level);
    params.projectors.push_back(
        init_mlp(cfg.shared_dim, cfg.projector_hidden, cfg.projector_out, rng));
  }
  return params;
}

std::pair<Matrix, SharedCache> forward_shared(const EncoderParams& params,
                                              const Matrix& features) {
  if (features.cols != params.adapter.w1.rows) {
    throw ShapeMismatch("forward_shared: feature dim " + std::to_string(features.cols) +
                        " != input dim " + std::to_string(params.adapter.w1.rows));
  }
  SharedCache cache;
  cache.input = features;
  cache.pre1 = affine(features, params.adapter.w1, params.adapter.b1);
  cache.act1 = apply_activation(params.activation, cache.pre1);
  cache.shared = affine(cache.act1, params.adapter.w2, params.adapter.b2);
  return {cache.shared, std::move(cache)};
}

std::pair<Matrix, ProjectorCache> forward_projector(const EncoderParams& params,
                                                    Level level,
                                                    const Matrix& shared) {
  const auto it = std::find(params.levels.begin(), params.levels.end(), level);
  if (it == params.levels.end()) {
    throw ShapeMismatch(std::string("no projector head for level ") + level_name(level));
  }
  const MlpParams& proj = params.projectors[static_cast<std::size_t>(it - params.levels.begin())];
  if (shared.cols != proj.w1.rows) {
    throw ShapeMismatch("forward_projector: shared dim mismatch");
  }

  ProjectorCache cache;
  cache.pre1 = affine(shared, proj.w1, proj.b1);
  cache.act1 = apply_activation(params.activation, cache.pre1);
  cache.raw = affine(cache.act1, proj.w2, proj.b2);

  cache.norms.resize(cache.raw.rows);
  cache.z = cache.raw;
  for (std::size_t i = 0; i < cache.raw.rows; ++i) {
    const double norm = std::sqrt(dot(cache.raw.row(i), cache.raw.row(i)));
    cache.norms[i] = norm;
    const double denom = std::max(norm, kNormEpsilon);
    for (auto& v : cache.z.row(i)) v /= denom;
  }
  return {cache.z, std::move(cache)};
}

ParamGrads backward(const EncoderParams& params, const SharedCache& shared_cache,
                    const std::vector<ProjectorCache>& proj_caches,
                    const std::vector<Matrix>& grad_z,
                    const Matrix* grad_shared_extra) {
  if (proj_caches.size() != params.levels.size() || grad_z.size() != params.levels.size()) {
    throw ShapeMismatch("backward: per-level inputs do not match enabled levels");
  }

  ParamGrads grads;
  grads.adapter = zeros_like(params.adapter);
  for (const auto& proj : params.projectors) grads.projectors.push_back(zeros_like(proj));

  Matrix grad_shared(shared_cache.shared.rows, shared_cache.shared.cols);
  if (grad_shared_extra != nullptr) {
    if (!grad_shared_extra->same_shape(grad_shared)) {
      throw ShapeMismatch("backward: grad_shared_extra shape mismatch");
    }
    grad_shared = *grad_shared_extra;
  }

  for (std::size_t l = 0; l < params.levels.size(); ++l) {
    const ProjectorCache& cache = proj_caches[l];
    const Matrix& gz = grad_z[l];
    if (!gz.same_shape(cache.z)) {
      throw ShapeMismatch("backward: grad_z shape mismatch at level " +
                          std::string(level_name(params.levels[l])));
    }

    // Through the row normalization: dL/draw = (gz - (gz . z) z) / max(||raw||, eps)
    Matrix grad_raw(cache.raw.rows, cache.raw.cols);
    for (std::size_t i = 0; i < cache.raw.rows; ++i) {
      const auto zrow = cache.z.row(i);
      const auto gzrow = gz.row(i);
      const double coeff = dot(gzrow, zrow);
      const double denom = std::max(cache.norms[i], kNormEpsilon);
      auto out = grad_raw.row(i);
      for (std::size_t j = 0; j < cache.raw.cols; ++j) {
        out[j] = (gzrow[j] - coeff * zrow[j]) / denom;
      }
    }

    Matrix grad_shared_l =
        backward_mlp(params.activation, shared_cache.shared, cache.pre1, cache.act1,
                     params.projectors[l], grad_raw, grads.projectors[l]);
    for (std::size_t i = 0; i < grad_shared.data.size(); ++i) {
      grad_shared.data[i] += grad_shared_l.data[i];
    }
  }

  backward_mlp(params.activation, shared_cache.input, shared_cache.pre1,
               shared_cache.act1, params.adapter, grad_shared, grads.adapter);
  return grads;
}

OptState OptState::create(const EncoderParams& params, double lr,
                          double weight_decay, double beta1, double beta2,
                          double eps) {
  OptState state;
  state.lr = lr;
  state.weight_decay = weight_decay;
  state.beta1 = beta1;
  state.beta2 = beta2;
  state.eps = eps;
  for_each_tensor(const_cast<EncoderParams&>(params), [&](std::vector<double>& t) {
    state.m.emplace_back(t.size(), 0.0);
    state.v.emplace_back(t.size(), 0.0);
  });
  return state;
}

void opt_step(EncoderParams& params, const ParamGrads& grads, OptState& state) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  std::vector<std::vector<double>*> param_tensors;
  for_each_tensor(params, [&](std::vector<double>& t) { param_tensors.push_back(&t); });
  std::vector<const std::vector<double>*> grad_tensors;
  for_each_tensor(const_cast<ParamGrads&>(grads),
                  [&](std::vector<double>& t) { grad_tensors.push_back(&t); });
  if (param_tensors.size() != grad_tensors.size() ||
      param_tensors.size() != state.m.size()) {
    throw ShapeMismatch("opt_step: parameter/gradient/state tensor counts differ");
  }

  for (std::size_t t = 0; t < param_tensors.size(); ++t) {
    auto& theta = *param_tensors[t];
    const auto& g = *grad_tensors[t];
    if (theta.size() != g.size() || theta.size() != state.m[t].size()) {
      throw ShapeMismatch("opt_step: tensor size mismatch");
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      state.m[t][i] = state.beta1 * state.m[t][i] + (1.0 - state.beta1) * g[i];
      state.v[t][i] = state.beta2 * state.v[t][i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = state.m[t][i] / bc1;
      const double v_hat = state.v[t][i] / bc2;
      theta[i] -= state.lr * (m_hat / (std::sqrt(v_hat) + state.eps) +
                              state.weight_decay * theta[i]);
    }
  }
}

std::vector<std::uint8_t> encode_checkpoint(const EncoderParams& params,
                                            const ArchConfig& cfg) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + sizeof(kMagic));
  append_u32(out, kCheckpointVersion);
  append_u32(out, static_cast<std::uint32_t>(cfg.input_dim));
  append_u32(out, static_cast<std::uint32_t>(cfg.adapter_hidden));
  append_u32(out, static_cast<std::uint32_t>(cfg.shared_dim));
  append_u32(out, static_cast<std::uint32_t>(cfg.projector_hidden));
  append_u32(out, static_cast<std::uint32_t>(cfg.projector_out));
  append_u32(out, static_cast<std::uint32_t>(cfg.activation));

  std::uint32_t level_mask = 0;
  for (Level level : params.levels) level_mask |= 1u << static_cast<int>(level);
  append_u32(out, level_mask);

  for_each_tensor(const_cast<EncoderParams&>(params), [&](std::vector<double>& t) {
    for (double v : t) append_f64(out, v);
  });
  append_u32(out, crc32(out.data(), out.size()));
  return out;
}

std::pair<EncoderParams, ArchConfig> decode_checkpoint(
    const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 + 4) {
    throw CorruptCheckpoint("checkpoint too small");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptCheckpoint("bad magic bytes");
  }
  const std::uint32_t stored_crc =
      static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
      static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8 |
      static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16 |
      static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24;
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc) {
    throw CorruptCheckpoint("checksum mismatch");
  }

  std::size_t pos = sizeof(kMagic);
  const std::uint32_t version = read_u32(bytes, pos);
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  }

  ArchConfig cfg;
  cfg.input_dim = read_u32(bytes, pos);
  cfg.adapter_hidden = read_u32(bytes, pos);
  cfg.shared_dim = read_u32(bytes, pos);
  cfg.projector_hidden = read_u32(bytes, pos);
  cfg.projector_out = read_u32(bytes, pos);
  cfg.activation = static_cast<Activation>(read_u32(bytes, pos));

  const std::uint32_t level_mask = read_u32(bytes, pos);
  std::vector<Level> levels;
  for (Level level : kAllLevels) {
    if (level_mask & (1u << static_cast<int>(level))) levels.push_back(level);
  }

  // Rebuild the tensor layout, then overwrite values from the stream.
  EncoderParams params = init_params(cfg, 0, levels);
  params.activation = cfg.activation;
  for_each_tensor(params, [&](std::vector<double>& t) {
    for (auto& v : t) v = read_f64(bytes, pos);
  });
  if (pos != bytes.size() - 4) {
    throw CorruptCheckpoint("trailing bytes in checkpoint");
  }
  return {std::move(params), cfg};
}

void save_checkpoint(const EncoderParams& params, const ArchConfig& cfg,
                     const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(params, cfg);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::pair<EncoderParams, ArchConfig> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace hiercon
