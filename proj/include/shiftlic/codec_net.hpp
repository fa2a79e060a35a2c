#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cra.hpp"
#include "entropy.hpp"
#include "ssb.hpp"

namespace shiftlic {

// Static shape of a codec network. `n` is the working width of the main
// transforms, `m` the latent width, `hyper_width` the side-channel width.
// The ablation switches drop pieces of the shift and attention blocks
// without touching anything else.
struct ModelConfig {
  std::int64_t n = 192;
  std::int64_t m = 320;
  std::int64_t hyper_width = 192;
  // Per-stage width override for the main transforms; 0 keeps `n`.
  std::array<std::int64_t, 4> stage_widths{0, 0, 0, 0};
  int ssb_per_stage = 3;
  int hyper_ssb_a = 2;
  int hyper_ssb_s = 1;
  bool cra_enabled = true;
  int shift_groups = 4;
  int shift_step = 1;
  int shuffle_groups = 8;
  int pyramid_levels = 4;
  bool ssb_shift_enabled = true;
  bool ssb_conv2_enabled = true;
  bool cra_shuffle_enabled = true;
  bool cra_local_enabled = true;

  std::int64_t stage_width(int k) const {
    const std::int64_t w = stage_widths[std::size_t(k)];
    return w > 0 ? w : n;
  }

  static ModelConfig medium() { return ModelConfig{}; }

  static ModelConfig small() {
    ModelConfig c;
    c.cra_enabled = false;
    return c;
  }

  // Widths sized for quick single-core experiments.
  static ModelConfig tiny() {
    ModelConfig c;
    c.n = 32;
    c.m = 64;
    c.hyper_width = 48;
    c.cra_enabled = false;
    return c;
  }

  static ModelConfig desk_medium() {
    ModelConfig c;
    c.n = 32;
    c.m = 320;
    c.hyper_width = 48;
    c.cra_enabled = true;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "medium") return medium();
    if (name == "small") return small();
    if (name == "tiny") return tiny();
    if (name == "desk_medium") return desk_medium();
    throw Error("config: unknown preset '" + name + "'");
  }

  void validate() const {
    require(n > 0 && m > 0 && hyper_width > 0, "config: widths must be positive");
    require(ssb_per_stage >= 1 && hyper_ssb_a >= 1 && hyper_ssb_s >= 1,
            "config: block counts must be positive");
    require(shift_groups > 0 && hyper_width % shift_groups == 0,
            "config: widths must divide into shift groups");
    require(shift_step >= 1, "config: bad shift step");
    require(pyramid_levels == 4, "config: pyramid depth is fixed at four");
    for (int k = 0; k < 4; ++k) {
      const std::int64_t wk = stage_width(k);
      require(wk > 0 && wk % shift_groups == 0,
              "config: stage widths must divide into shift groups");
      if (cra_enabled && (k == 1 || k == 3)) {
        require(wk % pyramid_levels == 0, "config: width must split into pyramid");
        const std::int64_t gc = wk / pyramid_levels;
        for (int i = 1; i < pyramid_levels; ++i)
          require((gc * (i + 1)) % shuffle_groups == 0,
                  "config: fuse widths must divide into shuffle groups");
      }
    }
  }

  // Transforms downsample by 16; the attention pyramid needs another factor
  // of eight at the quarter-resolution stage.
  std::int64_t pad_multiple() const { return cra_enabled ? 128 : 64; }

  // Diagonal shift directions, cycled when more than four groups are asked
  // for (the ablation grid uses 2, 4, 8, and 16 groups).
  ShiftSpec shift_spec() const {
    static const std::pair<int, int> kDiagonals[4] = {
        {-1, -1}, {-1, +1}, {+1, -1}, {+1, +1}};
    ShiftSpec s;
    s.groups = shift_groups;
    s.step = shift_step;
    s.offsets.clear();
    for (int i = 0; i < shift_groups; ++i) s.offsets.push_back(kDiagonals[i % 4]);
    return s;
  }

  std::vector<std::uint8_t> bytes() const {
    std::vector<std::uint8_t> b;
    auto u16 = [&b](std::int64_t v) {
      b.push_back(std::uint8_t(v & 0xFF));
      b.push_back(std::uint8_t((v >> 8) & 0xFF));
    };
    u16(n);
    u16(m);
    u16(hyper_width);
    for (int k = 0; k < 4; ++k) u16(stage_widths[std::size_t(k)]);
    b.push_back(std::uint8_t(ssb_per_stage));
    b.push_back(std::uint8_t(hyper_ssb_a));
    b.push_back(std::uint8_t(hyper_ssb_s));
    b.push_back(std::uint8_t(cra_enabled ? 1 : 0));
    b.push_back(std::uint8_t(shift_groups));
    b.push_back(std::uint8_t(shift_step));
    b.push_back(std::uint8_t(shuffle_groups));
    b.push_back(std::uint8_t(pyramid_levels));
    const std::uint8_t flags =
        std::uint8_t((ssb_shift_enabled ? 1 : 0) | (ssb_conv2_enabled ? 2 : 0) |
                     (cra_shuffle_enabled ? 4 : 0) | (cra_local_enabled ? 8 : 0));
    b.push_back(flags);
    return b;
  }

  static constexpr std::size_t kBlockSize = 23;

  static ModelConfig from_bytes(const std::vector<std::uint8_t>& b) {
    require(b.size() == kBlockSize, "config: bad block size");
    auto u16 = [&b](std::size_t i) {
      return std::int64_t(b[i]) | (std::int64_t(b[i + 1]) << 8);
    };
    ModelConfig c;
    c.n = u16(0);
    c.m = u16(2);
    c.hyper_width = u16(4);
    for (std::size_t k = 0; k < 4; ++k) c.stage_widths[k] = u16(6 + 2 * k);
    c.ssb_per_stage = b[14];
    c.hyper_ssb_a = b[15];
    c.hyper_ssb_s = b[16];
    c.cra_enabled = b[17] != 0;
    c.shift_groups = b[18];
    c.shift_step = b[19];
    c.shuffle_groups = b[20];
    c.pyramid_levels = b[21];
    c.ssb_shift_enabled = (b[22] & 1) != 0;
    c.ssb_conv2_enabled = (b[22] & 2) != 0;
    c.cra_shuffle_enabled = (b[22] & 4) != 0;
    c.cra_local_enabled = (b[22] & 8) != 0;
    c.validate();
    return c;
  }

  // One-byte fingerprint carried in bitstreams so a decoder can reject
  // streams produced under a different shape.
  std::uint8_t id_hash() const {
    std::uint32_t h = 2166136261u;
    for (std::uint8_t v : bytes()) {
      h ^= v;
      h *= 16777619u;
    }
    return std::uint8_t((h ^ (h >> 8) ^ (h >> 16) ^ (h >> 24)) & 0xFF);
  }
};

// The codec network: a four-stage analysis transform (each stage folds
// space into channels, projects, and runs a run of shift blocks; attention
// follows the second and fourth stages), its mirrored synthesis transform,
// a two-stage hyper pair predicting per-element Gaussian parameters, and a
// learned density for the side channel.
template <typename S>
class Model {
 public:
  using Id = typename Graph<S>::Id;

  struct DownStage {
    Conv1x1Layer<S> project;
    std::vector<Ssb<S>> blocks;
    std::optional<Cra<S>> cra;
  };
  struct UpStage {
    std::optional<Cra<S>> cra;
    std::vector<Ssb<S>> blocks;
    Conv1x1Layer<S> project;
  };
  struct HyperDownStage {
    Conv1x1Layer<S> project;
    std::vector<Ssb<S>> blocks;
  };
  struct HyperUpStage {
    std::vector<Ssb<S>> blocks;
    Conv1x1Layer<S> project;
  };

  ModelConfig cfg;
  std::vector<DownStage> a_stages;
  Conv1x1Layer<S> a_out;
  Conv1x1Layer<S> s_in;
  std::vector<UpStage> s_stages;  // deepest first
  std::vector<HyperDownStage> ha_stages;
  std::vector<HyperUpStage> hs_stages;
  Conv1x1Layer<S> hs_out;
  FactorizedPrior<S> prior;

  explicit Model(const ModelConfig& config, std::uint64_t seed = 0) : cfg(config) {
    cfg.validate();
    Rng rng(seed);
    const ShiftSpec spec = cfg.shift_spec();
    const std::int64_t m = cfg.m, h = cfg.hyper_width;

    for (int k = 0; k < 4; ++k) {
      DownStage st;
      const std::int64_t wk = cfg.stage_width(k);
      const std::int64_t in = (k == 0 ? 3 : cfg.stage_width(k - 1)) * 4;
      st.project = Conv1x1Layer<S>(stage_name("ga", k) + ".project", in, wk, rng);
      for (int j = 0; j < cfg.ssb_per_stage; ++j)
        st.blocks.emplace_back(stage_name("ga", k) + ".ssb" + std::to_string(j),
                               wk, wk, spec, rng, cfg.ssb_shift_enabled,
                               cfg.ssb_conv2_enabled);
      if (cfg.cra_enabled && (k == 1 || k == 3))
        st.cra.emplace(stage_name("ga", k) + ".cra", wk, spec, rng,
                       cfg.shuffle_groups, cfg.cra_shuffle_enabled,
                       cfg.cra_local_enabled);
      a_stages.push_back(std::move(st));
    }
    a_out = Conv1x1Layer<S>("ga.out", cfg.stage_width(3), m, rng);

    s_in = Conv1x1Layer<S>("gs.in", m, cfg.stage_width(3), rng);
    for (int k = 3; k >= 0; --k) {
      UpStage st;
      const std::int64_t wk = cfg.stage_width(k);
      if (cfg.cra_enabled && (k == 1 || k == 3))
        st.cra.emplace(stage_name("gs", k) + ".cra", wk, spec, rng,
                       cfg.shuffle_groups, cfg.cra_shuffle_enabled,
                       cfg.cra_local_enabled);
      for (int j = 0; j < cfg.ssb_per_stage; ++j)
        st.blocks.emplace_back(stage_name("gs", k) + ".ssb" + std::to_string(j),
                               wk, wk, spec, rng, cfg.ssb_shift_enabled,
                               cfg.ssb_conv2_enabled);
      const std::int64_t out = (k == 0 ? 3 : cfg.stage_width(k - 1)) * 4;
      st.project = Conv1x1Layer<S>(stage_name("gs", k) + ".project", wk, out, rng);
      s_stages.push_back(std::move(st));
    }

    for (int k = 0; k < 2; ++k) {
      HyperDownStage st;
      const std::int64_t in = (k == 0 ? m : h) * 4;
      st.project = Conv1x1Layer<S>(stage_name("ha", k) + ".project", in, h, rng);
      for (int j = 0; j < cfg.hyper_ssb_a; ++j)
        st.blocks.emplace_back(stage_name("ha", k) + ".ssb" + std::to_string(j),
                               h, h, spec, rng, cfg.ssb_shift_enabled,
                               cfg.ssb_conv2_enabled);
      ha_stages.push_back(std::move(st));
    }
    for (int k = 0; k < 2; ++k) {
      HyperUpStage st;
      for (int j = 0; j < cfg.hyper_ssb_s; ++j)
        st.blocks.emplace_back(stage_name("hs", k) + ".ssb" + std::to_string(j),
                               h, h, spec, rng, cfg.ssb_shift_enabled,
                               cfg.ssb_conv2_enabled);
      st.project = Conv1x1Layer<S>(stage_name("hs", k) + ".project", h, h * 4, rng);
      hs_stages.push_back(std::move(st));
    }
    hs_out = Conv1x1Layer<S>("hs.out", h, 2 * m, rng);
    prior = FactorizedPrior<S>("prior", h, rng);
  }

  // Image (B, 3, H, W) to latents (B, m, H/16, W/16). H and W must be
  // multiples of pad_multiple(); the container codec pads beforehand.
  Id analysis(Graph<S>& g, Id x) {
    const Tensor<S>& xt = g.value(x);
    require(xt.c() == 3, "analysis: expected three input channels");
    require(xt.h() % cfg.pad_multiple() == 0 && xt.w() % cfg.pad_multiple() == 0,
            "analysis: size not padded to the transform multiple");
    Id t = x;
    for (auto& st : a_stages) {
      t = g.pixel_rearrange(t, 2, Rearrange::kSpaceToChannel);
      t = st.project.forward(g, t);
      for (auto& b : st.blocks) t = b.forward(g, t);
      if (st.cra) t = st.cra->forward(g, t);
    }
    return a_out.forward(g, t);
  }

  Id synthesis(Graph<S>& g, Id y_hat) {
    Id t = s_in.forward(g, y_hat);
    for (auto& st : s_stages) {
      if (st.cra) t = st.cra->forward(g, t);
      for (auto& b : st.blocks) t = b.forward(g, t);
      t = st.project.forward(g, t);
      t = g.pixel_rearrange(t, 2, Rearrange::kChannelToSpace);
    }
    return t;
  }

  // Latents to side channel (B, hyper_width, H/64, W/64).
  Id hyper_analysis(Graph<S>& g, Id y) {
    Id t = y;
    for (auto& st : ha_stages) {
      t = g.pixel_rearrange(t, 2, Rearrange::kSpaceToChannel);
      t = st.project.forward(g, t);
      for (auto& b : st.blocks) t = b.forward(g, t);
    }
    return t;
  }

  // Side channel to per-element Gaussian mean and scale over the latents.
  std::pair<Id, Id> hyper_synthesis(Graph<S>& g, Id z_hat) {
    Id t = z_hat;
    for (auto& st : hs_stages) {
      for (auto& b : st.blocks) t = b.forward(g, t);
      t = st.project.forward(g, t);
      t = g.pixel_rearrange(t, 2, Rearrange::kChannelToSpace);
    }
    t = hs_out.forward(g, t);
    Id mu = g.channel_slice(t, 0, cfg.m);
    Id raw = g.channel_slice(t, cfg.m, 2 * cfg.m);
    Id sigma = g.affine(g.softplus(raw), 1.0, kSigmaMin);
    return {mu, sigma};
  }

  void visit(const ParamVisitor<S>& fn) {
    for (auto& st : a_stages) {
      st.project.visit(fn);
      for (auto& b : st.blocks) b.visit(fn);
      if (st.cra) st.cra->visit(fn);
    }
    a_out.visit(fn);
    s_in.visit(fn);
    for (auto& st : s_stages) {
      if (st.cra) st.cra->visit(fn);
      for (auto& b : st.blocks) b.visit(fn);
      st.project.visit(fn);
    }
    for (auto& st : ha_stages) {
      st.project.visit(fn);
      for (auto& b : st.blocks) b.visit(fn);
    }
    for (auto& st : hs_stages) {
      for (auto& b : st.blocks) b.visit(fn);
      st.project.visit(fn);
    }
    hs_out.visit(fn);
    prior.visit(fn);
  }

  std::uint64_t parameter_total() {
    std::uint64_t n = 0;
    visit([&n](Parameter<S>& p) { n += std::uint64_t(p.numel()); });
    return n;
  }

 private:
  static std::string stage_name(const char* prefix, int k) {
    return std::string(prefix) + ".s" + std::to_string(k);
  }
};

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {char(v & 0xFF), char((v >> 8) & 0xFF)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v & 0xFF), char((v >> 8) & 0xFF),
                     char((v >> 16) & 0xFF), char((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  require(bool(is), "checkpoint: unexpected end of file");
  return std::uint16_t(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  require(bool(is), "checkpoint: unexpected end of file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline float get_f32(std::istream& is) {
  const std::uint32_t u = get_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

inline constexpr char kCheckpointMagic[6] = {'S', 'L', 'I', 'C', 'W', '\0'};

}  // namespace detail

// Weight file: magic, format version, config block, then a table of named
// float32 parameter tensors.
template <typename S>
void save_checkpoint(Model<S>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), "checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kCheckpointMagic, 6);
  os.put(char(1));
  const auto cfg_bytes = model.cfg.bytes();
  os.write(reinterpret_cast<const char*>(cfg_bytes.data()),
           std::streamsize(cfg_bytes.size()));

  std::uint32_t count = 0;
  model.visit([&count](Parameter<S>&) { ++count; });
  detail::put_u32(os, count);
  model.visit([&os](Parameter<S>& p) {
    require(p.name.size() <= 0xFFFF, "checkpoint: parameter name too long");
    detail::put_u16(os, std::uint16_t(p.name.size()));
    os.write(p.name.data(), std::streamsize(p.name.size()));
    for (int d = 0; d < 4; ++d)
      detail::put_u32(os, std::uint32_t(p.value.shape[std::size_t(d)]));
    for (std::int64_t i = 0; i < p.value.numel(); ++i)
      detail::put_f32(os, float(p.value.data[i]));
  });
  require(bool(os), "checkpoint: write failed for '" + path + "'");
}

// Fills an existing model from a weight file; the file's config must match.
template <typename S>
void load_into(Model<S>& model, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "checkpoint: cannot open '" + path + "'");
  char magic[6];
  is.read(magic, 6);
  require(bool(is) && std::memcmp(magic, detail::kCheckpointMagic, 6) == 0,
          "checkpoint: bad magic");
  const int version = is.get();
  require(version == 1, "checkpoint: unsupported version");
  std::vector<std::uint8_t> cfg_bytes(ModelConfig::kBlockSize);
  is.read(reinterpret_cast<char*>(cfg_bytes.data()),
          std::streamsize(cfg_bytes.size()));
  require(bool(is), "checkpoint: unexpected end of file");
  const ModelConfig file_cfg = ModelConfig::from_bytes(cfg_bytes);
  require(file_cfg.bytes() == model.cfg.bytes(),
          "checkpoint: config does not match model");

  const std::uint32_t count = detail::get_u32(is);
  std::map<std::string, Tensor<S>> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = detail::get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    require(bool(is), "checkpoint: unexpected end of file");
    std::int64_t shape[4];
    for (auto& d : shape) d = detail::get_u32(is);
    Tensor<S> t(shape[0], shape[1], shape[2], shape[3]);
    for (std::int64_t j = 0; j < t.numel(); ++j) t.data[j] = S(detail::get_f32(is));
    require(table.emplace(name, std::move(t)).second,
            "checkpoint: duplicate parameter '" + name + "'");
  }

  std::uint32_t used = 0;
  model.visit([&table, &used](Parameter<S>& p) {
    auto it = table.find(p.name);
    require(it != table.end(), "checkpoint: missing parameter '" + p.name + "'");
    require(it->second.same_shape(p.value),
            "checkpoint: shape mismatch for '" + p.name + "'");
    p.value = std::move(it->second);
    ++used;
  });
  require(used == count, "checkpoint: file has unknown extra parameters");
}

template <typename S>
Model<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "checkpoint: cannot open '" + path + "'");
  char magic[6];
  is.read(magic, 6);
  require(bool(is) && std::memcmp(magic, detail::kCheckpointMagic, 6) == 0,
          "checkpoint: bad magic");
  const int version = is.get();
  require(version == 1, "checkpoint: unsupported version");
  std::vector<std::uint8_t> cfg_bytes(ModelConfig::kBlockSize);
  is.read(reinterpret_cast<char*>(cfg_bytes.data()),
          std::streamsize(cfg_bytes.size()));
  require(bool(is), "checkpoint: unexpected end of file");
  Model<S> model(ModelConfig::from_bytes(cfg_bytes));
  load_into(model, path);
  return model;
}

}  // namespace shiftlic
