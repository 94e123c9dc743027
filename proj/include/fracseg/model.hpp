#pragma once

// Encoder/decoder segmentation network: four encoder blocks, three decoder
// blocks, cross-scale attention replacing the plain skip connections at
// levels 2 and 3. Channel widths double per level from a configurable base.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fracseg/common.hpp"
#include "fracseg/tensor.hpp"

namespace fracseg {

struct CsaConfig {
  int inter_channels = 0;  // 0: use the channel count of F_l
};

struct NetworkConfig {
  int in_channels = 1;
  int num_classes = 2;
  int base_width = 8;
  bool use_csa = true;  // false: plain skip connections everywhere (ablation)
  CsaConfig csa;

  int width_at(int level) const { return base_width << (level - 1); }  // levels 1..4

  void validate() const {
    if (in_channels < 1 || num_classes < 2 || base_width < 1)
      throw DataError("network config: bad channel configuration");
  }
};

namespace detail {

inline Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape), true);
  const float std_dev = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (float& v : t.value()) v = gaussian(rng, 0.0f, std_dev);
  return t;
}

}  // namespace detail

class ParamRegistry {
 public:
  void add(const std::string& name, Tensor t) { params_.emplace_back(name, std::move(t)); }
  std::vector<std::pair<std::string, Tensor>>& items() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return params_; }
  int64_t count() const {
    int64_t n = 0;
    for (const auto& [k, t] : params_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
};

struct ConvLayer {
  ConvSpec spec;
  Tensor w, b;

  static ConvLayer make(const std::string& name, const ConvSpec& spec, Rng& rng,
                        ParamRegistry& reg, bool transposed = false) {
    ConvLayer l;
    l.spec = spec;
    const int k3 = spec.kernel[0] * spec.kernel[1] * spec.kernel[2];
    if (transposed)
      l.w = detail::he_normal({spec.in_channels, spec.out_channels, spec.kernel[0],
                               spec.kernel[1], spec.kernel[2]},
                              spec.in_channels * k3, rng);
    else
      l.w = detail::he_normal({spec.out_channels, spec.in_channels, spec.kernel[0],
                               spec.kernel[1], spec.kernel[2]},
                              spec.in_channels * k3, rng);
    l.b = Tensor({spec.out_channels}, true);
    reg.add(name + ".w", l.w);
    reg.add(name + ".b", l.b);
    return l;
  }

  Tensor forward(Tape& tape, const Tensor& x) const { return conv3d(tape, x, w, b, spec); }
  Tensor forward_transposed(Tape& tape, const Tensor& x) const {
    return conv_transpose3d(tape, x, w, b, spec);
  }
};

struct BnLayer {
  Tensor gamma, beta;
  BatchNormStats stats;

  static BnLayer make(const std::string& name, int channels, Rng&, ParamRegistry& reg) {
    BnLayer l;
    l.gamma = Tensor::full({channels}, 1.0f, true);
    l.beta = Tensor({channels}, true);
    l.stats = BatchNormStats(channels);
    reg.add(name + ".gamma", l.gamma);
    reg.add(name + ".beta", l.beta);
    return l;
  }

  Tensor forward(Tape& tape, const Tensor& x, BnMode mode) {
    return batch_norm(tape, x, gamma, beta, stats, mode);
  }
};

// Conv(3x3x3, pad 1) -> BN -> ReLU
struct ConvBnRelu {
  ConvLayer conv;
  BnLayer bn;

  static ConvBnRelu make(const std::string& name, int in_c, int out_c, Rng& rng,
                         ParamRegistry& reg) {
    ConvBnRelu l;
    l.conv = ConvLayer::make(name + ".conv", ConvSpec::cubic(3, 1, 1, in_c, out_c), rng, reg);
    l.bn = BnLayer::make(name + ".bn", out_c, rng, reg);
    return l;
  }

  Tensor forward(Tape& tape, const Tensor& x, BnMode mode) {
    return relu(tape, bn.forward(tape, conv.forward(tape, x), mode));
  }
};

struct EncoderBlock {
  ConvBnRelu c1, c2;
  bool pools;

  static EncoderBlock make(const std::string& name, int in_c, int out_c, bool pools,
                           Rng& rng, ParamRegistry& reg) {
    return {ConvBnRelu::make(name + ".c1", in_c, out_c, rng, reg),
            ConvBnRelu::make(name + ".c2", out_c, out_c, rng, reg), pools};
  }

  // returns (features, pooled); pooled undefined for the bottleneck block
  std::pair<Tensor, Tensor> forward(Tape& tape, const Tensor& x, BnMode mode) {
    Tensor f = c2.forward(tape, c1.forward(tape, x, mode), mode);
    if (!pools) return {f, Tensor()};
    return {f, max_pool3d(tape, f)};
  }
};

// Two-stage attention gate. Stage 1 modulates F_l by full-resolution detail
// (F_1); stage 2 modulates the result by coarser decoder semantics (F_g).
struct CsaModule {
  int level = 2;        // F_1 is 2^(level-1) times finer than F_l
  ConvLayer conv_l;     // k1 on F_l
  ConvLayer conv_1;     // strided alignment conv on F_1
  ConvLayer squeeze1;   // k1 -> 1 channel
  ConvLayer conv_g;     // k1 on F_g
  ConvLayer conv_lhat;  // k2 s2 on F_l_hat, evaluated at F_g resolution
  ConvLayer squeeze2;   // k1 -> 1 channel
  bool force_att1_one = false;  // test hook: bypass stage-1 gating

  static CsaModule make(const std::string& name, int level, int c1, int cl, int cg,
                        const CsaConfig& cfg, Rng& rng, ParamRegistry& reg) {
    CsaModule m;
    m.level = level;
    const int inter = cfg.inter_channels > 0 ? cfg.inter_channels : cl;
    const int align = 1 << (level - 1);
    m.conv_l = ConvLayer::make(name + ".conv_l", ConvSpec::cubic(1, 1, 0, cl, inter), rng, reg);
    m.conv_1 = ConvLayer::make(name + ".conv_1", ConvSpec::cubic(align, align, 0, c1, inter),
                               rng, reg);
    m.squeeze1 =
        ConvLayer::make(name + ".squeeze1", ConvSpec::cubic(1, 1, 0, inter, 1), rng, reg);
    m.conv_g = ConvLayer::make(name + ".conv_g", ConvSpec::cubic(1, 1, 0, cg, inter), rng, reg);
    m.conv_lhat =
        ConvLayer::make(name + ".conv_lhat", ConvSpec::cubic(2, 2, 0, cl, inter), rng, reg);
    m.squeeze2 =
        ConvLayer::make(name + ".squeeze2", ConvSpec::cubic(1, 1, 0, inter, 1), rng, reg);
    return m;
  }

  // Att1 = sigmoid(squeeze(relu(conv_l(Fl) + conv_1(F1)))); Fl_hat = Fl * Att1
  std::pair<Tensor, Tensor> attention1(Tape& tape, const Tensor& f1, const Tensor& fl) const {
    const int align = 1 << (level - 1);
    for (int a = 0; a < 3; ++a)
      if (f1.dim(2 + a) != fl.dim(2 + a) * align)
        throw ShapeError("csa_attention_1: F1 extents must be " + std::to_string(align) +
                         "x those of Fl on axis " + std::to_string(a));
    Tensor att1;
    if (force_att1_one) {
      att1 = Tensor::full({fl.dim(0), 1, fl.dim(2), fl.dim(3), fl.dim(4)}, 1.0f);
    } else {
      Tensor sum = add(tape, conv_l.forward(tape, fl), conv_1.forward(tape, f1));
      att1 = sigmoid(tape, squeeze1.forward(tape, relu(tape, sum)));
    }
    return {att1, mul_gate(tape, fl, att1)};
  }

  // Att2 at F_g resolution, upsampled x2 and applied to Fl_hat.
  Tensor attention2(Tape& tape, const Tensor& fl_hat, const Tensor& fg) const {
    for (int a = 0; a < 3; ++a)
      if (fl_hat.dim(2 + a) != fg.dim(2 + a) * 2)
        throw ShapeError("csa_attention_2: Fg extents must be half those of Fl_hat on axis " +
                         std::to_string(a));
    Tensor sum = add(tape, conv_g.forward(tape, fg), conv_lhat.forward(tape, fl_hat));
    Tensor att2 = sigmoid(tape, squeeze2.forward(tape, relu(tape, sum)));
    return mul_gate(tape, fl_hat, upsample_trilinear(tape, att2, 2));
  }

  Tensor forward(Tape& tape, const Tensor& f1, const Tensor& fl, const Tensor& fg) const {
    auto [att1, fl_hat] = attention1(tape, f1, fl);
    return attention2(tape, fl_hat, fg);
  }
};

struct DecoderBlock {
  ConvLayer upconv;  // transposed, k3 s2 p1 op1: doubles spatial extents
  ConvBnRelu c1, c2;

  static DecoderBlock make(const std::string& name, int in_c, int skip_c, int out_c,
                           Rng& rng, ParamRegistry& reg) {
    DecoderBlock b;
    ConvSpec up = ConvSpec::cubic(3, 2, 1, in_c, out_c, 1);
    b.upconv = ConvLayer::make(name + ".up", up, rng, reg, /*transposed=*/true);
    b.c1 = ConvBnRelu::make(name + ".c1", out_c + skip_c, out_c, rng, reg);
    b.c2 = ConvBnRelu::make(name + ".c2", out_c, out_c, rng, reg);
    return b;
  }

  Tensor forward(Tape& tape, const Tensor& x, const Tensor& skip, BnMode mode) {
    Tensor up = upconv.forward_transposed(tape, x);
    for (int a = 2; a < 5; ++a)
      if (up.dim(a) != skip.dim(a))
        throw ShapeError("decoder_block: upsampled extents do not match skip features on axis " +
                         std::to_string(a - 2) + " (odd input extents?)");
    Tensor cat = concat_channels(tape, skip, up);
    return c2.forward(tape, c1.forward(tape, cat, mode), mode);
  }
};

class Network {
 public:
  explicit Network(const NetworkConfig& cfg, uint64_t seed = 42) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int b = cfg_.base_width;
    enc_.push_back(EncoderBlock::make("enc1", cfg_.in_channels, b, true, rng, reg_));
    enc_.push_back(EncoderBlock::make("enc2", b, 2 * b, true, rng, reg_));
    enc_.push_back(EncoderBlock::make("enc3", 2 * b, 4 * b, true, rng, reg_));
    enc_.push_back(EncoderBlock::make("enc4", 4 * b, 8 * b, false, rng, reg_));
    if (cfg_.use_csa) {
      // level 3: F_l = enc3 features (4b), F_g = bottleneck (8b)
      csa3_ = CsaModule::make("csa3", 3, b, 4 * b, 8 * b, cfg_.csa, rng, reg_);
      // level 2: F_l = enc2 features (2b), F_g = decoder level-3 output (4b)
      csa2_ = CsaModule::make("csa2", 2, b, 2 * b, 4 * b, cfg_.csa, rng, reg_);
    }
    dec3_ = DecoderBlock::make("dec3", 8 * b, 4 * b, 4 * b, rng, reg_);
    dec2_ = DecoderBlock::make("dec2", 4 * b, 2 * b, 2 * b, rng, reg_);
    dec1_ = DecoderBlock::make("dec1", 2 * b, b, b, rng, reg_);
    head_ = ConvLayer::make("head", ConvSpec::cubic(1, 1, 0, b, cfg_.num_classes), rng, reg_);
  }

  // Softmax probabilities, shape (N, num_classes, D, H, W).
  Tensor forward(Tape& tape, const Tensor& input, BnMode mode = BnMode::kTrain) {
    if (input.ndim() != 5)
      throw ShapeError("network forward: expected 5-D input");
    for (int a = 2; a < 5; ++a)
      if (input.dim(a) % 8 != 0)
        throw ShapeError("network forward: spatial extents must be divisible by 8");
    auto [f1, p1] = enc_[0].forward(tape, input, mode);
    auto [f2, p2] = enc_[1].forward(tape, p1, mode);
    auto [f3, p3] = enc_[2].forward(tape, p2, mode);
    auto [f4, _] = enc_[3].forward(tape, p3, mode);

    Tensor skip3 = cfg_.use_csa ? csa3_.forward(tape, f1, f3, f4) : f3;
    Tensor d3 = dec3_.forward(tape, f4, skip3, mode);
    Tensor skip2 = cfg_.use_csa ? csa2_.forward(tape, f1, f2, d3) : f2;
    Tensor d2 = dec2_.forward(tape, d3, skip2, mode);
    Tensor d1 = dec1_.forward(tape, d2, f1, mode);  // level 1: plain skip
    return softmax_channel(tape, head_.forward(tape, d1));
  }

  const NetworkConfig& config() const { return cfg_; }
  ParamRegistry& params() { return reg_; }
  const ParamRegistry& params() const { return reg_; }
  CsaModule* csa_level(int level) {
    if (!cfg_.use_csa) return nullptr;
    return level == 2 ? &csa2_ : level == 3 ? &csa3_ : nullptr;
  }

  void zero_grads() {
    for (auto& [k, t] : reg_.items()) t.zero_grad();
  }

  // Checkpoint: text manifest (config echo, entry names and shapes) followed
  // by TNSR1 snapshots in manifest order. BN running stats ride along as
  // buffer entries.
  void save_checkpoint(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
    auto buffers = bn_buffers();
    os << "CKPT1\n";
    os << "cfg in_channels " << cfg_.in_channels << "\n";
    os << "cfg num_classes " << cfg_.num_classes << "\n";
    os << "cfg base_width " << cfg_.base_width << "\n";
    os << "cfg use_csa " << (cfg_.use_csa ? 1 : 0) << "\n";
    os << "cfg csa_inter_channels " << cfg_.csa.inter_channels << "\n";
    for (const auto& [name, t] : reg_.items()) {
      os << "tensor " << name << " " << t.ndim();
      for (int i = 0; i < t.ndim(); ++i) os << " " << t.dim(i);
      os << "\n";
    }
    for (const auto& [name, vec] : buffers)
      os << "buffer " << name << " " << vec->size() << "\n";
    os << "data\n";
    for (const auto& [name, t] : reg_.items()) write_tensor_snapshot(os, t);
    for (const auto& [name, vec] : buffers) {
      Tensor t = Tensor::from_data({static_cast<int>(vec->size())}, *vec);
      write_tensor_snapshot(os, t);
    }
    if (!os) throw DataError("checkpoint: short write to " + path);
  }

  void load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "CKPT1")
      throw DataError("checkpoint: magic mismatch in " + path);
    std::vector<std::pair<std::string, bool>> order;  // name, is_buffer
    while (std::getline(is, line)) {
      if (line == "data") break;
      std::istringstream ls(line);
      std::string kind, name;
      ls >> kind >> name;
      if (kind == "cfg") {
        std::string value;
        ls >> value;
        check_cfg_entry(name, value, path);
      } else if (kind == "tensor") {
        order.emplace_back(name, false);
      } else if (kind == "buffer") {
        order.emplace_back(name, true);
      } else {
        throw DataError("checkpoint: unknown manifest entry '" + kind + "' in " + path);
      }
    }
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, t] : reg_.items()) by_name[name] = &t;
    auto buffers = bn_buffers();
    std::map<std::string, std::vector<float>*> buf_by_name(buffers.begin(), buffers.end());
    for (const auto& [name, is_buffer] : order) {
      Tensor t = read_tensor_snapshot(is);
      if (is_buffer) {
        auto it = buf_by_name.find(name);
        if (it == buf_by_name.end())
          throw DataError("checkpoint: unknown buffer '" + name + "'");
        if (t.size() != static_cast<int64_t>(it->second->size()))
          throw DataError("checkpoint: buffer size mismatch for '" + name + "'");
        *it->second = t.value();
      } else {
        auto it = by_name.find(name);
        if (it == by_name.end())
          throw DataError("checkpoint: unknown tensor '" + name + "'");
        if (t.shape() != it->second->shape())
          throw DataError("checkpoint: shape mismatch for '" + name + "'");
        it->second->value() = t.value();
      }
    }
  }

 private:
  void check_cfg_entry(const std::string& key, const std::string& value,
                       const std::string& path) const {
    auto expect = [&](int want) {
      if (std::stoi(value) != want)
        throw DataError("checkpoint " + path + ": config mismatch on '" + key +
                        "' (file " + value + ", network " + std::to_string(want) + ")");
    };
    if (key == "in_channels") expect(cfg_.in_channels);
    else if (key == "num_classes") expect(cfg_.num_classes);
    else if (key == "base_width") expect(cfg_.base_width);
    else if (key == "use_csa") expect(cfg_.use_csa ? 1 : 0);
    else if (key == "csa_inter_channels") expect(cfg_.csa.inter_channels);
  }

  std::vector<std::pair<std::string, std::vector<float>*>> bn_buffers() {
    std::vector<std::pair<std::string, std::vector<float>*>> out;
    auto add_block = [&](const std::string& name, ConvBnRelu& l) {
      out.emplace_back(name + ".bn.mean", &l.bn.stats.running_mean);
      out.emplace_back(name + ".bn.var", &l.bn.stats.running_var);
    };
    for (size_t i = 0; i < enc_.size(); ++i) {
      add_block("enc" + std::to_string(i + 1) + ".c1", enc_[i].c1);
      add_block("enc" + std::to_string(i + 1) + ".c2", enc_[i].c2);
    }
    add_block("dec3.c1", dec3_.c1);
    add_block("dec3.c2", dec3_.c2);
    add_block("dec2.c1", dec2_.c1);
    add_block("dec2.c2", dec2_.c2);
    add_block("dec1.c1", dec1_.c1);
    add_block("dec1.c2", dec1_.c2);
    return out;
  }

  NetworkConfig cfg_;
  ParamRegistry reg_;
  std::vector<EncoderBlock> enc_;
  CsaModule csa2_, csa3_;
  DecoderBlock dec3_, dec2_, dec1_;
  ConvLayer head_;
};

}  // namespace fracseg
