#pragma once

// Dense N-D float tensor with reverse-mode differentiation on a dynamic tape.
// Layout is row-major with width fastest; 5-D feature maps are N,C,D,H,W.

#include <cassert>
#include <cmath>
#include <cstring>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fracseg/common.hpp"

namespace fracseg {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false)
      : d_(std::make_shared<Data>()) {
    d_->shape = std::move(shape);
    d_->value.assign(static_cast<size_t>(product(d_->shape)), 0.0f);
    d_->requires_grad = requires_grad;
  }

  static Tensor full(std::vector<int> shape, float v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.value().begin(), t.value().end(), v);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (static_cast<int64_t>(data.size()) != t.size())
      throw ShapeError("from_data: payload size does not match shape");
    t.value() = std::move(data);
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(d_->value.size()); }

  std::vector<float>& value() { return d_->value; }
  const std::vector<float>& value() const { return d_->value; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<float>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0f);
    return d_->grad;
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
  }

  float item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor");
    return d_->value[0];
  }

  // Identity of the underlying storage, used by parameter registries.
  const void* id() const { return d_.get(); }

 private:
  struct Data {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;  // lazily allocated, same length as value
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;
};

// Records backward closures during a forward pass and replays them in
// reverse. One tape per training step; ops append only when recording and
// some input requires grad.
class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  void push(std::function<void()> back_op) { ops_.push_back(std::move(back_op)); }

  void backward(Tensor loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
    loss.grad()[0] = 1.0f;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  // Replay with a caller-seeded output gradient (vector-Jacobian product).
  void backward_from(Tensor& seeded) {
    if (!seeded.has_grad()) throw ShapeError("backward_from: output grad not seeded");
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  size_t num_ops() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
  bool recording_ = true;
};

namespace detail {

inline bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> ins) {
  if (!tape.recording()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace detail

struct ConvSpec {
  int kernel[3] = {3, 3, 3};       // k_d, k_h, k_w
  int stride[3] = {1, 1, 1};
  int padding[3] = {0, 0, 0};
  int output_padding[3] = {0, 0, 0};  // transposed only
  int in_channels = 0;
  int out_channels = 0;

  static ConvSpec cubic(int k, int s, int p, int in_c, int out_c, int op = 0) {
    ConvSpec c;
    for (int a = 0; a < 3; ++a) {
      c.kernel[a] = k;
      c.stride[a] = s;
      c.padding[a] = p;
      c.output_padding[a] = op;
    }
    c.in_channels = in_c;
    c.out_channels = out_c;
    return c;
  }

  int out_extent(int axis, int in) const {
    return (in + 2 * padding[axis] - kernel[axis]) / stride[axis] + 1;
  }
  int transposed_out_extent(int axis, int in) const {
    return (in - 1) * stride[axis] - 2 * padding[axis] + kernel[axis] + output_padding[axis];
  }
};

namespace detail {

inline void check_5d(const Tensor& t, const char* name) {
  if (t.ndim() != 5)
    throw ShapeError(std::string(name) + ": expected 5-D (N,C,D,H,W), got " +
                     shape_str(t.shape()));
}

// Direct 3-D correlation core shared by conv3d forward, conv3d input-grad
// (via transposed geometry) and weight-grad. Accumulates
//   out[n][oc][od][oh][ow] (+)= sum_ic,k w[...] * in[n][ic][od*s-p+k...]
inline void conv3d_accumulate(const float* in, int N, int C, int D, int H, int W,
                              const float* w, const ConvSpec& sp,
                              float* out, int OD, int OH, int OW) {
  const int KD = sp.kernel[0], KH = sp.kernel[1], KW = sp.kernel[2];
  const int SD = sp.stride[0], SH = sp.stride[1], SW = sp.stride[2];
  const int PD = sp.padding[0], PH = sp.padding[1], PW = sp.padding[2];
  const int64_t in_ch = static_cast<int64_t>(D) * H * W;
  const int64_t out_ch = static_cast<int64_t>(OD) * OH * OW;
  for (int n = 0; n < N; ++n) {
    const float* in_n = in + static_cast<int64_t>(n) * C * in_ch;
    float* out_n = out + static_cast<int64_t>(n) * sp.out_channels * out_ch;
    for (int oc = 0; oc < sp.out_channels; ++oc) {
      float* out_c = out_n + oc * out_ch;
      for (int ic = 0; ic < C; ++ic) {
        const float* in_c = in_n + ic * in_ch;
        const float* w_oc = w + (static_cast<int64_t>(oc) * C + ic) * KD * KH * KW;
        for (int kd = 0; kd < KD; ++kd)
          for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw) {
              const float wv = w_oc[(kd * KH + kh) * KW + kw];
              if (wv == 0.0f) continue;
              for (int od = 0; od < OD; ++od) {
                const int id = od * SD - PD + kd;
                if (id < 0 || id >= D) continue;
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * SH - PH + kh;
                  if (ih < 0 || ih >= H) continue;
                  float* orow = out_c + (static_cast<int64_t>(od) * OH + oh) * OW;
                  const float* irow = in_c + (static_cast<int64_t>(id) * H + ih) * W;
                  // clip ow range so iw stays in bounds
                  int ow0 = 0, ow1 = OW;
                  while (ow0 < OW && ow0 * SW - PW + kw < 0) ++ow0;
                  while (ow1 > ow0 && (ow1 - 1) * SW - PW + kw >= W) --ow1;
                  const float* ir = irow + (ow0 * SW - PW + kw);
                  if (SW == 1) {
                    for (int ow = ow0; ow < ow1; ++ow) orow[ow] += wv * ir[ow - ow0];
                  } else {
                    for (int ow = ow0; ow < ow1; ++ow)
                      orow[ow] += wv * irow[ow * SW - PW + kw];
                  }
                }
              }
            }
      }
    }
  }
}

// Scatter form: out[id] += w * in[od], geometry identical to
// conv3d_accumulate but writing through the input positions. Used by the
// input-gradient of conv3d and the forward of conv_transpose3d.
inline void conv3d_scatter(const float* src, int N, int OC, int OD, int OH, int OW,
                           const float* w, const ConvSpec& sp, int IC,
                           float* dst, int D, int H, int W) {
  const int KD = sp.kernel[0], KH = sp.kernel[1], KW = sp.kernel[2];
  const int SD = sp.stride[0], SH = sp.stride[1], SW = sp.stride[2];
  const int PD = sp.padding[0], PH = sp.padding[1], PW = sp.padding[2];
  const int64_t src_ch = static_cast<int64_t>(OD) * OH * OW;
  const int64_t dst_ch = static_cast<int64_t>(D) * H * W;
  for (int n = 0; n < N; ++n) {
    const float* src_n = src + static_cast<int64_t>(n) * OC * src_ch;
    float* dst_n = dst + static_cast<int64_t>(n) * IC * dst_ch;
    for (int oc = 0; oc < OC; ++oc) {
      const float* src_c = src_n + oc * src_ch;
      for (int ic = 0; ic < IC; ++ic) {
        float* dst_c = dst_n + ic * dst_ch;
        const float* w_oc = w + (static_cast<int64_t>(oc) * IC + ic) * KD * KH * KW;
        for (int kd = 0; kd < KD; ++kd)
          for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw) {
              const float wv = w_oc[(kd * KH + kh) * KW + kw];
              if (wv == 0.0f) continue;
              for (int od = 0; od < OD; ++od) {
                const int id = od * SD - PD + kd;
                if (id < 0 || id >= D) continue;
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * SH - PH + kh;
                  if (ih < 0 || ih >= H) continue;
                  const float* srow = src_c + (static_cast<int64_t>(od) * OH + oh) * OW;
                  float* drow = dst_c + (static_cast<int64_t>(id) * H + ih) * W;
                  int ow0 = 0, ow1 = OW;
                  while (ow0 < OW && ow0 * SW - PW + kw < 0) ++ow0;
                  while (ow1 > ow0 && (ow1 - 1) * SW - PW + kw >= W) --ow1;
                  if (SW == 1) {
                    float* dr = drow + (ow0 * SW - PW + kw);
                    for (int ow = ow0; ow < ow1; ++ow) dr[ow - ow0] += wv * srow[ow];
                  } else {
                    for (int ow = ow0; ow < ow1; ++ow)
                      drow[ow * SW - PW + kw] += wv * srow[ow];
                  }
                }
              }
            }
      }
    }
  }
}

// Weight gradient: gw[oc][ic][k] += sum over output positions in[id]*gout[od].
inline void conv3d_weight_grad(const float* in, int N, int C, int D, int H, int W,
                               const float* gout, const ConvSpec& sp,
                               int OD, int OH, int OW, float* gw) {
  const int KD = sp.kernel[0], KH = sp.kernel[1], KW = sp.kernel[2];
  const int SD = sp.stride[0], SH = sp.stride[1], SW = sp.stride[2];
  const int PD = sp.padding[0], PH = sp.padding[1], PW = sp.padding[2];
  const int64_t in_ch = static_cast<int64_t>(D) * H * W;
  const int64_t out_ch = static_cast<int64_t>(OD) * OH * OW;
  for (int n = 0; n < N; ++n) {
    const float* in_n = in + static_cast<int64_t>(n) * C * in_ch;
    const float* go_n = gout + static_cast<int64_t>(n) * sp.out_channels * out_ch;
    for (int oc = 0; oc < sp.out_channels; ++oc) {
      const float* go_c = go_n + oc * out_ch;
      for (int ic = 0; ic < C; ++ic) {
        const float* in_c = in_n + ic * in_ch;
        float* gw_oc = gw + (static_cast<int64_t>(oc) * C + ic) * KD * KH * KW;
        for (int kd = 0; kd < KD; ++kd)
          for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw) {
              double acc = 0.0;
              for (int od = 0; od < OD; ++od) {
                const int id = od * SD - PD + kd;
                if (id < 0 || id >= D) continue;
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * SH - PH + kh;
                  if (ih < 0 || ih >= H) continue;
                  const float* grow = go_c + (static_cast<int64_t>(od) * OH + oh) * OW;
                  const float* irow = in_c + (static_cast<int64_t>(id) * H + ih) * W;
                  int ow0 = 0, ow1 = OW;
                  while (ow0 < OW && ow0 * SW - PW + kw < 0) ++ow0;
                  while (ow1 > ow0 && (ow1 - 1) * SW - PW + kw >= W) --ow1;
                  if (SW == 1) {
                    const float* ir = irow + (ow0 - PW + kw);
                    for (int ow = ow0; ow < ow1; ++ow) acc += static_cast<double>(grow[ow]) * ir[ow - ow0];
                  } else {
                    for (int ow = ow0; ow < ow1; ++ow)
                      acc += static_cast<double>(grow[ow]) * irow[ow * SW - PW + kw];
                  }
                }
              }
              gw_oc[(kd * KH + kh) * KW + kw] += static_cast<float>(acc);
            }
      }
    }
  }
}

}  // namespace detail

// weights: (out_c, in_c, k_d, k_h, k_w); bias: (out_c).
inline Tensor conv3d(Tape& tape, const Tensor& input, const Tensor& weights,
                     const Tensor& bias, const ConvSpec& spec) {
  detail::check_5d(input, "conv3d input");
  if (input.dim(1) != spec.in_channels)
    throw ShapeError("conv3d: channel axis mismatch, input C=" + std::to_string(input.dim(1)) +
                     " but spec.in_channels=" + std::to_string(spec.in_channels));
  const std::vector<int> wshape = {spec.out_channels, spec.in_channels,
                                   spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  if (weights.shape() != wshape)
    throw ShapeError("conv3d: weights shape " + detail::shape_str(weights.shape()) +
                     " != " + detail::shape_str(wshape));
  if (bias.shape() != std::vector<int>{spec.out_channels})
    throw ShapeError("conv3d: bias axis mismatch, expected (" +
                     std::to_string(spec.out_channels) + ")");
  const int N = input.dim(0), C = input.dim(1);
  const int D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const int OD = spec.out_extent(0, D), OH = spec.out_extent(1, H), OW = spec.out_extent(2, W);
  if (OD < 1 || OH < 1 || OW < 1)
    throw ShapeError("conv3d: output extent < 1 on a spatial axis for input " +
                     detail::shape_str(input.shape()));

  Tensor out({N, spec.out_channels, OD, OH, OW},
             detail::want_grad(tape, {&input, &weights, &bias}));
  {  // bias pre-fill
    const int64_t out_ch = static_cast<int64_t>(OD) * OH * OW;
    float* o = out.value().data();
    for (int n = 0; n < N; ++n)
      for (int oc = 0; oc < spec.out_channels; ++oc) {
        const float b = bias.value()[static_cast<size_t>(oc)];
        float* p = o + (static_cast<int64_t>(n) * spec.out_channels + oc) * out_ch;
        for (int64_t i = 0; i < out_ch; ++i) p[i] = b;
      }
  }
  detail::conv3d_accumulate(input.value().data(), N, C, D, H, W,
                            weights.value().data(), spec,
                            out.value().data(), OD, OH, OW);

  if (out.requires_grad()) {
    Tensor in_t = input, w_t = weights, b_t = bias, out_t = out;
    ConvSpec sp = spec;
    tape.push([in_t, w_t, b_t, out_t, sp, N, C, D, H, W, OD, OH, OW]() mutable {
      const float* go = out_t.grad().data();
      if (in_t.requires_grad())
        detail::conv3d_scatter(go, N, sp.out_channels, OD, OH, OW,
                               w_t.value().data(), sp, C,
                               in_t.grad().data(), D, H, W);
      if (w_t.requires_grad())
        detail::conv3d_weight_grad(in_t.value().data(), N, C, D, H, W, go, sp,
                                   OD, OH, OW, w_t.grad().data());
      if (b_t.requires_grad()) {
        const int64_t out_ch = static_cast<int64_t>(OD) * OH * OW;
        for (int n = 0; n < N; ++n)
          for (int oc = 0; oc < sp.out_channels; ++oc) {
            const float* p = go + (static_cast<int64_t>(n) * sp.out_channels + oc) * out_ch;
            double acc = 0.0;
            for (int64_t i = 0; i < out_ch; ++i) acc += p[i];
            b_t.grad()[static_cast<size_t>(oc)] += static_cast<float>(acc);
          }
      }
    });
  }
  return out;
}

// weights: (in_c, out_c, k_d, k_h, k_w) — the adjoint of a strided conv3d.
inline Tensor conv_transpose3d(Tape& tape, const Tensor& input, const Tensor& weights,
                               const Tensor& bias, const ConvSpec& spec) {
  detail::check_5d(input, "conv_transpose3d input");
  if (input.dim(1) != spec.in_channels)
    throw ShapeError("conv_transpose3d: channel axis mismatch, input C=" +
                     std::to_string(input.dim(1)));
  for (int a = 0; a < 3; ++a)
    if (spec.output_padding[a] >= spec.stride[a])
      throw ShapeError("conv_transpose3d: output_padding >= stride on axis " +
                       std::to_string(a));
  const std::vector<int> wshape = {spec.in_channels, spec.out_channels,
                                   spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  if (weights.shape() != wshape)
    throw ShapeError("conv_transpose3d: weights shape " + detail::shape_str(weights.shape()) +
                     " != " + detail::shape_str(wshape));
  const int N = input.dim(0), C = input.dim(1);
  const int D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const int OD = spec.transposed_out_extent(0, D);
  const int OH = spec.transposed_out_extent(1, H);
  const int OW = spec.transposed_out_extent(2, W);
  if (OD < 1 || OH < 1 || OW < 1)
    throw ShapeError("conv_transpose3d: output extent < 1");

  Tensor out({N, spec.out_channels, OD, OH, OW},
             detail::want_grad(tape, {&input, &weights, &bias}));
  {
    const int64_t out_ch = static_cast<int64_t>(OD) * OH * OW;
    float* o = out.value().data();
    for (int n = 0; n < N; ++n)
      for (int oc = 0; oc < spec.out_channels; ++oc) {
        const float b = bias.value()[static_cast<size_t>(oc)];
        float* p = o + (static_cast<int64_t>(n) * spec.out_channels + oc) * out_ch;
        for (int64_t i = 0; i < out_ch; ++i) p[i] = b;
      }
  }
  // Forward of the transpose is the scatter of the underlying conv whose
  // input is `out` and output is `input`; weight index (ic, oc) maps to the
  // underlying conv's (oc=ic, ic=oc).
  ConvSpec under = spec;
  under.in_channels = spec.out_channels;   // spatial side (large)
  under.out_channels = spec.in_channels;   // strided side (small)
  detail::conv3d_scatter(input.value().data(), N, C, D, H, W,
                         weights.value().data(), under, spec.out_channels,
                         out.value().data(), OD, OH, OW);

  if (out.requires_grad()) {
    Tensor in_t = input, w_t = weights, b_t = bias, out_t = out;
    tape.push([in_t, w_t, b_t, out_t, under, spec, N, D, H, W, OD, OH, OW]() mutable {
      const float* go = out_t.grad().data();
      if (in_t.requires_grad())
        detail::conv3d_accumulate(go, N, spec.out_channels, OD, OH, OW,
                                  w_t.value().data(), under,
                                  in_t.grad().data(), D, H, W);
      if (w_t.requires_grad())
        detail::conv3d_weight_grad(go, N, spec.out_channels, OD, OH, OW,
                                   in_t.value().data(), under, D, H, W,
                                   w_t.grad().data());
      if (b_t.requires_grad()) {
        const int64_t out_ch = static_cast<int64_t>(OD) * OH * OW;
        for (int n = 0; n < N; ++n)
          for (int oc = 0; oc < spec.out_channels; ++oc) {
            const float* p = go + (static_cast<int64_t>(n) * spec.out_channels + oc) * out_ch;
            double acc = 0.0;
            for (int64_t i = 0; i < out_ch; ++i) acc += p[i];
            b_t.grad()[static_cast<size_t>(oc)] += static_cast<float>(acc);
          }
      }
    });
  }
  return out;
}

// 2x2x2 windows, stride 2. Backward routes to the first maximum in scan order.
inline Tensor max_pool3d(Tape& tape, const Tensor& input) {
  detail::check_5d(input, "max_pool3d input");
  const int N = input.dim(0), C = input.dim(1);
  const int D = input.dim(2), H = input.dim(3), W = input.dim(4);
  if (D % 2 || H % 2 || W % 2)
    throw ShapeError("max_pool3d: spatial extents must be even, got " +
                     detail::shape_str(input.shape()) + "; pad the input first");
  const int OD = D / 2, OH = H / 2, OW = W / 2;
  Tensor out({N, C, OD, OH, OW}, detail::want_grad(tape, {&input}));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.value().size());
  const float* in = input.value().data();
  float* o = out.value().data();
  int64_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * D * H * W;
      for (int od = 0; od < OD; ++od)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow, ++oi) {
            float best = -std::numeric_limits<float>::infinity();
            int64_t best_i = -1;
            for (int dd = 0; dd < 2; ++dd)
              for (int dh = 0; dh < 2; ++dh)
                for (int dw = 0; dw < 2; ++dw) {
                  const int64_t ii = base +
                      (static_cast<int64_t>(od * 2 + dd) * H + oh * 2 + dh) * W + ow * 2 + dw;
                  if (in[ii] > best) { best = in[ii]; best_i = ii; }
                }
            o[oi] = best;
            (*argmax)[static_cast<size_t>(oi)] = best_i;
          }
    }
  if (out.requires_grad()) {
    Tensor in_t = input, out_t = out;
    tape.push([in_t, out_t, argmax]() mutable {
      float* gi = in_t.grad().data();
      const float* go = out_t.grad().data();
      for (size_t i = 0; i < argmax->size(); ++i)
        gi[(*argmax)[i]] += go[i];
    });
  }
  return out;
}

struct BatchNormStats {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  explicit BatchNormStats(int channels = 0)
      : running_mean(static_cast<size_t>(channels), 0.0f),
        running_var(static_cast<size_t>(channels), 1.0f) {}
};

enum class BnMode { kTrain, kEval };

// Per-channel normalization over (N,D,H,W); eps 1e-5, running momentum 0.1.
inline Tensor batch_norm(Tape& tape, const Tensor& input, const Tensor& gamma,
                         const Tensor& beta, BatchNormStats& stats, BnMode mode) {
  detail::check_5d(input, "batch_norm input");
  const int C = input.dim(1);
  if (gamma.size() != C || beta.size() != C)
    throw ShapeError("batch_norm: gamma/beta length must equal channel count " +
                     std::to_string(C));
  if (static_cast<int>(stats.running_mean.size()) != C)
    throw ShapeError("batch_norm: running stats length mismatch");
  constexpr float kEps = 1e-5f;
  constexpr float kMomentum = 0.1f;
  const int N = input.dim(0);
  const int64_t sp = static_cast<int64_t>(input.dim(2)) * input.dim(3) * input.dim(4);
  const int64_t per_channel = static_cast<int64_t>(N) * sp;

  Tensor out(input.shape(), detail::want_grad(tape, {&input, &gamma, &beta}));
  std::vector<float> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  const float* x = input.value().data();
  if (mode == BnMode::kTrain) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0, s2 = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* p = x + (static_cast<int64_t>(n) * C + c) * sp;
        for (int64_t i = 0; i < sp; ++i) { s += p[i]; s2 += static_cast<double>(p[i]) * p[i]; }
      }
      const double m = s / static_cast<double>(per_channel);
      mean[static_cast<size_t>(c)] = static_cast<float>(m);
      var[static_cast<size_t>(c)] =
          static_cast<float>(std::max(0.0, s2 / static_cast<double>(per_channel) - m * m));
      stats.running_mean[static_cast<size_t>(c)] =
          (1 - kMomentum) * stats.running_mean[static_cast<size_t>(c)] +
          kMomentum * mean[static_cast<size_t>(c)];
      stats.running_var[static_cast<size_t>(c)] =
          (1 - kMomentum) * stats.running_var[static_cast<size_t>(c)] +
          kMomentum * var[static_cast<size_t>(c)];
    }
  } else {
    mean = stats.running_mean;
    var = stats.running_var;
  }

  auto xhat = std::make_shared<std::vector<float>>(input.value().size());
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(C));
  float* o = out.value().data();
  for (int c = 0; c < C; ++c) {
    const float is = 1.0f / std::sqrt(var[static_cast<size_t>(c)] + kEps);
    (*inv_std)[static_cast<size_t>(c)] = is;
    const float g = gamma.value()[static_cast<size_t>(c)];
    const float b = beta.value()[static_cast<size_t>(c)];
    const float m = mean[static_cast<size_t>(c)];
    for (int n = 0; n < N; ++n) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * sp;
      for (int64_t i = 0; i < sp; ++i) {
        const float xh = (x[base + i] - m) * is;
        (*xhat)[static_cast<size_t>(base + i)] = xh;
        o[base + i] = g * xh + b;
      }
    }
  }

  if (out.requires_grad()) {
    Tensor in_t = input, g_t = gamma, b_t = beta, out_t = out;
    const bool train = (mode == BnMode::kTrain);
    tape.push([in_t, g_t, b_t, out_t, xhat, inv_std, N, C, sp, per_channel, train]() mutable {
      const float* go = out_t.grad().data();
      for (int c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < N; ++n) {
          const int64_t base = (static_cast<int64_t>(n) * C + c) * sp;
          for (int64_t i = 0; i < sp; ++i) {
            sum_dy += go[base + i];
            sum_dy_xhat += static_cast<double>(go[base + i]) *
                           (*xhat)[static_cast<size_t>(base + i)];
          }
        }
        if (g_t.requires_grad())
          g_t.grad()[static_cast<size_t>(c)] += static_cast<float>(sum_dy_xhat);
        if (b_t.requires_grad())
          b_t.grad()[static_cast<size_t>(c)] += static_cast<float>(sum_dy);
        if (in_t.requires_grad()) {
          const float g = g_t.value()[static_cast<size_t>(c)];
          const float is = (*inv_std)[static_cast<size_t>(c)];
          float* gi = in_t.grad().data();
          if (train) {
            const float mean_dy = static_cast<float>(sum_dy / static_cast<double>(per_channel));
            const float mean_dy_xhat =
                static_cast<float>(sum_dy_xhat / static_cast<double>(per_channel));
            for (int n = 0; n < N; ++n) {
              const int64_t base = (static_cast<int64_t>(n) * C + c) * sp;
              for (int64_t i = 0; i < sp; ++i)
                gi[base + i] += g * is *
                    (go[base + i] - mean_dy -
                     (*xhat)[static_cast<size_t>(base + i)] * mean_dy_xhat);
            }
          } else {
            for (int n = 0; n < N; ++n) {
              const int64_t base = (static_cast<int64_t>(n) * C + c) * sp;
              for (int64_t i = 0; i < sp; ++i) gi[base + i] += g * is * go[base + i];
            }
          }
        }
      }
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& input) {
  Tensor out(input.shape(), detail::want_grad(tape, {&input}));
  const float* x = input.value().data();
  float* o = out.value().data();
  for (int64_t i = 0; i < input.size(); ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
  if (out.requires_grad()) {
    Tensor in_t = input, out_t = out;
    tape.push([in_t, out_t]() mutable {
      const float* x = in_t.value().data();
      const float* go = out_t.grad().data();
      float* gi = in_t.grad().data();
      for (int64_t i = 0; i < in_t.size(); ++i)
        if (x[i] > 0.0f) gi[i] += go[i];
    });
  }
  return out;
}

inline Tensor sigmoid(Tape& tape, const Tensor& input) {
  Tensor out(input.shape(), detail::want_grad(tape, {&input}));
  const float* x = input.value().data();
  float* o = out.value().data();
  for (int64_t i = 0; i < input.size(); ++i)
    o[i] = 1.0f / (1.0f + std::exp(-x[i]));
  if (out.requires_grad()) {
    Tensor in_t = input, out_t = out;
    tape.push([in_t, out_t]() mutable {
      const float* y = out_t.value().data();
      const float* go = out_t.grad().data();
      float* gi = in_t.grad().data();
      for (int64_t i = 0; i < in_t.size(); ++i) gi[i] += go[i] * y[i] * (1.0f - y[i]);
    });
  }
  return out;
}

// Softmax over the channel axis at every voxel.
inline Tensor softmax_channel(Tape& tape, const Tensor& input) {
  detail::check_5d(input, "softmax_channel input");
  const int C = input.dim(1);
  if (C < 2) throw ShapeError("softmax_channel: needs C >= 2");
  const int N = input.dim(0);
  const int64_t sp = static_cast<int64_t>(input.dim(2)) * input.dim(3) * input.dim(4);
  Tensor out(input.shape(), detail::want_grad(tape, {&input}));
  const float* x = input.value().data();
  float* o = out.value().data();
  for (int n = 0; n < N; ++n) {
    const int64_t nb = static_cast<int64_t>(n) * C * sp;
    for (int64_t i = 0; i < sp; ++i) {
      float mx = -std::numeric_limits<float>::infinity();
      for (int c = 0; c < C; ++c) mx = std::max(mx, x[nb + c * sp + i]);
      float z = 0.0f;
      for (int c = 0; c < C; ++c) {
        const float e = std::exp(x[nb + c * sp + i] - mx);
        o[nb + c * sp + i] = e;
        z += e;
      }
      for (int c = 0; c < C; ++c) o[nb + c * sp + i] /= z;
    }
  }
  if (out.requires_grad()) {
    Tensor in_t = input, out_t = out;
    tape.push([in_t, out_t, N, C, sp]() mutable {
      const float* y = out_t.value().data();
      const float* go = out_t.grad().data();
      float* gi = in_t.grad().data();
      for (int n = 0; n < N; ++n) {
        const int64_t nb = static_cast<int64_t>(n) * C * sp;
        for (int64_t i = 0; i < sp; ++i) {
          float dot = 0.0f;
          for (int c = 0; c < C; ++c) dot += go[nb + c * sp + i] * y[nb + c * sp + i];
          for (int c = 0; c < C; ++c)
            gi[nb + c * sp + i] += y[nb + c * sp + i] * (go[nb + c * sp + i] - dot);
        }
      }
    });
  }
  return out;
}

namespace detail {

// align-corners=false source coordinate for an integer upsample factor
inline void upsample_coeffs(int out_len, int in_len, int factor,
                            std::vector<int>& i0, std::vector<int>& i1,
                            std::vector<float>& w1) {
  i0.resize(static_cast<size_t>(out_len));
  i1.resize(static_cast<size_t>(out_len));
  w1.resize(static_cast<size_t>(out_len));
  for (int o = 0; o < out_len; ++o) {
    float src = (o + 0.5f) / static_cast<float>(factor) - 0.5f;
    src = std::max(0.0f, std::min(src, static_cast<float>(in_len - 1)));
    const int lo = static_cast<int>(src);
    i0[static_cast<size_t>(o)] = lo;
    i1[static_cast<size_t>(o)] = std::min(lo + 1, in_len - 1);
    w1[static_cast<size_t>(o)] = src - static_cast<float>(lo);
  }
}

}  // namespace detail

inline Tensor upsample_trilinear(Tape& tape, const Tensor& input, int factor = 2) {
  detail::check_5d(input, "upsample_trilinear input");
  if (factor < 1) throw ShapeError("upsample_trilinear: factor must be >= 1");
  if (factor == 1) {
    Tensor out(input.shape(), detail::want_grad(tape, {&input}));
    out.value() = input.value();
    if (out.requires_grad()) {
      Tensor in_t = input, out_t = out;
      tape.push([in_t, out_t]() mutable {
        float* gi = in_t.grad().data();
        const float* go = out_t.grad().data();
        for (int64_t i = 0; i < in_t.size(); ++i) gi[i] += go[i];
      });
    }
    return out;
  }
  const int N = input.dim(0), C = input.dim(1);
  const int D = input.dim(2), H = input.dim(3), W = input.dim(4);
  const int OD = D * factor, OH = H * factor, OW = W * factor;
  std::vector<int> d0, d1, h0, h1, w0, w1;
  std::vector<float> wd, wh, ww;
  detail::upsample_coeffs(OD, D, factor, d0, d1, wd);
  detail::upsample_coeffs(OH, H, factor, h0, h1, wh);
  detail::upsample_coeffs(OW, W, factor, w0, w1, ww);

  Tensor out({N, C, OD, OH, OW}, detail::want_grad(tape, {&input}));
  const float* x = input.value().data();
  float* o = out.value().data();
  const int64_t in_sp = static_cast<int64_t>(D) * H * W;
  const int64_t out_sp = static_cast<int64_t>(OD) * OH * OW;
  for (int nc = 0; nc < N * C; ++nc) {
    const float* xin = x + nc * in_sp;
    float* oo = o + nc * out_sp;
    for (int od = 0; od < OD; ++od) {
      const float fd = wd[static_cast<size_t>(od)];
      const int dA = d0[static_cast<size_t>(od)], dB = d1[static_cast<size_t>(od)];
      for (int oh = 0; oh < OH; ++oh) {
        const float fh = wh[static_cast<size_t>(oh)];
        const int hA = h0[static_cast<size_t>(oh)], hB = h1[static_cast<size_t>(oh)];
        float* orow = oo + (static_cast<int64_t>(od) * OH + oh) * OW;
        for (int ow = 0; ow < OW; ++ow) {
          const float fw = ww[static_cast<size_t>(ow)];
          const int wA = w0[static_cast<size_t>(ow)], wB = w1[static_cast<size_t>(ow)];
          auto v = [&](int dd, int hh, int wv) {
            return xin[(static_cast<int64_t>(dd) * H + hh) * W + wv];
          };
          const float c00 = v(dA, hA, wA) * (1 - fw) + v(dA, hA, wB) * fw;
          const float c01 = v(dA, hB, wA) * (1 - fw) + v(dA, hB, wB) * fw;
          const float c10 = v(dB, hA, wA) * (1 - fw) + v(dB, hA, wB) * fw;
          const float c11 = v(dB, hB, wA) * (1 - fw) + v(dB, hB, wB) * fw;
          orow[ow] = (c00 * (1 - fh) + c01 * fh) * (1 - fd) +
                     (c10 * (1 - fh) + c11 * fh) * fd;
        }
      }
    }
  }
  if (out.requires_grad()) {
    Tensor in_t = input, out_t = out;
    tape.push([in_t, out_t, N, C, D, H, W, OD, OH, OW,
               d0, d1, wd, h0, h1, wh, w0, w1, ww]() mutable {
      float* gi = in_t.grad().data();
      const float* go = out_t.grad().data();
      const int64_t in_sp = static_cast<int64_t>(D) * H * W;
      const int64_t out_sp = static_cast<int64_t>(OD) * OH * OW;
      for (int nc = 0; nc < N * C; ++nc) {
        float* gin = gi + nc * in_sp;
        const float* goo = go + nc * out_sp;
        for (int od = 0; od < OD; ++od) {
          const float fd = wd[static_cast<size_t>(od)];
          const int dA = d0[static_cast<size_t>(od)], dB = d1[static_cast<size_t>(od)];
          for (int oh = 0; oh < OH; ++oh) {
            const float fh = wh[static_cast<size_t>(oh)];
            const int hA = h0[static_cast<size_t>(oh)], hB = h1[static_cast<size_t>(oh)];
            const float* grow = goo + (static_cast<int64_t>(od) * OH + oh) * OW;
            for (int ow = 0; ow < OW; ++ow) {
              const float fw = ww[static_cast<size_t>(ow)];
              const int wA = w0[static_cast<size_t>(ow)], wB = w1[static_cast<size_t>(ow)];
              const float g = grow[ow];
              auto add = [&](int dd, int hh, int wv, float coef) {
                gin[(static_cast<int64_t>(dd) * H + hh) * W + wv] += g * coef;
              };
              add(dA, hA, wA, (1 - fd) * (1 - fh) * (1 - fw));
              add(dA, hA, wB, (1 - fd) * (1 - fh) * fw);
              add(dA, hB, wA, (1 - fd) * fh * (1 - fw));
              add(dA, hB, wB, (1 - fd) * fh * fw);
              add(dB, hA, wA, fd * (1 - fh) * (1 - fw));
              add(dB, hA, wB, fd * (1 - fh) * fw);
              add(dB, hB, wA, fd * fh * (1 - fw));
              add(dB, hB, wB, fd * fh * fw);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- wiring ops -----------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out(a.shape(), detail::want_grad(tape, {&a, &b}));
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  float* o = out.value().data();
  for (int64_t i = 0; i < a.size(); ++i) o[i] = pa[i] + pb[i];
  if (out.requires_grad()) {
    Tensor a_t = a, b_t = b, out_t = out;
    tape.push([a_t, b_t, out_t]() mutable {
      const float* go = out_t.grad().data();
      if (a_t.requires_grad()) {
        float* g = a_t.grad().data();
        for (int64_t i = 0; i < a_t.size(); ++i) g[i] += go[i];
      }
      if (b_t.requires_grad()) {
        float* g = b_t.grad().data();
        for (int64_t i = 0; i < b_t.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape& tape, const Tensor& a, float c) {
  Tensor out(a.shape(), detail::want_grad(tape, {&a}));
  const float* pa = a.value().data();
  float* o = out.value().data();
  for (int64_t i = 0; i < a.size(); ++i) o[i] = pa[i] * c;
  if (out.requires_grad()) {
    Tensor a_t = a, out_t = out;
    tape.push([a_t, out_t, c]() mutable {
      float* g = a_t.grad().data();
      const float* go = out_t.grad().data();
      for (int64_t i = 0; i < a_t.size(); ++i) g[i] += go[i] * c;
    });
  }
  return out;
}

// Element-wise product; `gate` may have a single channel broadcast over the
// channels of `x` (the attention-gating case).
inline Tensor mul_gate(Tape& tape, const Tensor& x, const Tensor& gate) {
  detail::check_5d(x, "mul_gate x");
  detail::check_5d(gate, "mul_gate gate");
  const bool broadcast = gate.dim(1) == 1 && x.dim(1) != 1;
  if (!broadcast) {
    detail::check_same_shape(x, gate, "mul_gate");
  } else {
    for (int a : {0, 2, 3, 4})
      if (x.dim(a) != gate.dim(a))
        throw ShapeError("mul_gate: non-channel axis " + std::to_string(a) + " mismatch");
  }
  const int N = x.dim(0), C = x.dim(1);
  const int64_t sp = static_cast<int64_t>(x.dim(2)) * x.dim(3) * x.dim(4);
  Tensor out(x.shape(), detail::want_grad(tape, {&x, &gate}));
  const float* px = x.value().data();
  const float* pg = gate.value().data();
  float* o = out.value().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t xb = (static_cast<int64_t>(n) * C + c) * sp;
      const int64_t gb = broadcast ? static_cast<int64_t>(n) * sp
                                   : (static_cast<int64_t>(n) * C + c) * sp;
      for (int64_t i = 0; i < sp; ++i) o[xb + i] = px[xb + i] * pg[gb + i];
    }
  if (out.requires_grad()) {
    Tensor x_t = x, g_t = gate, out_t = out;
    tape.push([x_t, g_t, out_t, N, C, sp, broadcast]() mutable {
      const float* go = out_t.grad().data();
      const float* px = x_t.value().data();
      const float* pg = g_t.value().data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const int64_t xb = (static_cast<int64_t>(n) * C + c) * sp;
          const int64_t gb = broadcast ? static_cast<int64_t>(n) * sp
                                       : (static_cast<int64_t>(n) * C + c) * sp;
          if (x_t.requires_grad()) {
            float* gx = x_t.grad().data();
            for (int64_t i = 0; i < sp; ++i) gx[xb + i] += go[xb + i] * pg[gb + i];
          }
          if (g_t.requires_grad()) {
            float* gg = g_t.grad().data();
            for (int64_t i = 0; i < sp; ++i) gg[gb + i] += go[xb + i] * px[xb + i];
          }
        }
    });
  }
  return out;
}

inline Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::check_5d(a, "concat a");
  detail::check_5d(b, "concat b");
  for (int ax : {0, 2, 3, 4})
    if (a.dim(ax) != b.dim(ax))
      throw ShapeError("concat_channels: non-channel axis " + std::to_string(ax) + " mismatch");
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const int64_t sp = static_cast<int64_t>(a.dim(2)) * a.dim(3) * a.dim(4);
  Tensor out({N, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)},
             detail::want_grad(tape, {&a, &b}));
  float* o = out.value().data();
  for (int n = 0; n < N; ++n) {
    std::memcpy(o + static_cast<int64_t>(n) * (Ca + Cb) * sp,
                a.value().data() + static_cast<int64_t>(n) * Ca * sp,
                static_cast<size_t>(Ca * sp) * sizeof(float));
    std::memcpy(o + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * sp,
                b.value().data() + static_cast<int64_t>(n) * Cb * sp,
                static_cast<size_t>(Cb * sp) * sizeof(float));
  }
  if (out.requires_grad()) {
    Tensor a_t = a, b_t = b, out_t = out;
    tape.push([a_t, b_t, out_t, N, Ca, Cb, sp]() mutable {
      const float* go = out_t.grad().data();
      for (int n = 0; n < N; ++n) {
        if (a_t.requires_grad()) {
          float* ga = a_t.grad().data() + static_cast<int64_t>(n) * Ca * sp;
          const float* g = go + static_cast<int64_t>(n) * (Ca + Cb) * sp;
          for (int64_t i = 0; i < Ca * sp; ++i) ga[i] += g[i];
        }
        if (b_t.requires_grad()) {
          float* gb = b_t.grad().data() + static_cast<int64_t>(n) * Cb * sp;
          const float* g = go + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * sp;
          for (int64_t i = 0; i < Cb * sp; ++i) gb[i] += g[i];
        }
      }
    });
  }
  return out;
}

inline Tensor sum_squares(Tape& tape, const Tensor& a) {
  Tensor out({1}, detail::want_grad(tape, {&a}));
  double acc = 0.0;
  const float* p = a.value().data();
  for (int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(p[i]) * p[i];
  out.value()[0] = static_cast<float>(acc);
  if (out.requires_grad()) {
    Tensor a_t = a, out_t = out;
    tape.push([a_t, out_t]() mutable {
      const float g = out_t.grad()[0];
      const float* p = a_t.value().data();
      float* ga = a_t.grad().data();
      for (int64_t i = 0; i < a_t.size(); ++i) ga[i] += 2.0f * p[i] * g;
    });
  }
  return out;
}

// ---- finite-difference gradient check -------------------------------------

// f must build a fresh graph each call: scalar loss from `point`'s current
// values. Analytic grad comes from one tape backward; the reference is a
// central difference evaluated in double.
inline double grad_check(const std::function<Tensor(Tape&, Tensor&)>& f, Tensor point,
                         double h = 1e-3, int max_coords = -1, uint64_t seed = 20240901) {
  point.set_requires_grad(true);
  point.zero_grad();
  Tape tape;
  Tensor loss = f(tape, point);
  if (!std::isfinite(loss.item()))
    throw NumericError("grad_check: non-finite function value");
  tape.backward(loss);
  std::vector<float> analytic = point.grad();

  std::vector<int64_t> coords;
  if (max_coords > 0 && max_coords < point.size()) {
    Rng rng(seed);
    for (int i = 0; i < max_coords; ++i) coords.push_back(uniform_index(rng, point.size()));
  } else {
    coords.resize(static_cast<size_t>(point.size()));
    for (int64_t i = 0; i < point.size(); ++i) coords[static_cast<size_t>(i)] = i;
  }

  double worst = 0.0;
  for (int64_t ci : coords) {
    const float orig = point.value()[static_cast<size_t>(ci)];
    point.value()[static_cast<size_t>(ci)] = orig + static_cast<float>(h);
    Tape t1;
    t1.set_recording(false);
    const double fp = f(t1, point).item();
    point.value()[static_cast<size_t>(ci)] = orig - static_cast<float>(h);
    Tape t2;
    t2.set_recording(false);
    const double fm = f(t2, point).item();
    point.value()[static_cast<size_t>(ci)] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite function value near point");
    const double fd = (fp - fm) / (2.0 * h);
    const double an = analytic[static_cast<size_t>(ci)];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-1});
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---- snapshot format ------------------------------------------------------
// Header line `TNSR1 <ndim> <extents...>` then little-endian f32 row-major.

inline void write_tensor_snapshot(std::ostream& os, const Tensor& t) {
  os << "TNSR1 " << t.ndim();
  for (int i = 0; i < t.ndim(); ++i) os << " " << t.dim(i);
  os << "\n";
  os.write(reinterpret_cast<const char*>(t.value().data()),
           static_cast<std::streamsize>(t.value().size() * sizeof(float)));
}

inline Tensor read_tensor_snapshot(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("tensor snapshot: missing header");
  std::istringstream hs(line);
  std::string magic;
  int nd = 0;
  hs >> magic >> nd;
  if (magic != "TNSR1" || nd <= 0) throw DataError("tensor snapshot: bad magic");
  std::vector<int> shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i)
    if (!(hs >> shape[static_cast<size_t>(i)]) || shape[static_cast<size_t>(i)] <= 0)
      throw DataError("tensor snapshot: bad extent");
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.value().data()),
          static_cast<std::streamsize>(t.value().size() * sizeof(float)));
  if (is.gcount() != static_cast<std::streamsize>(t.value().size() * sizeof(float)))
    throw DataError("tensor snapshot: truncated payload");
  return t;
}

}  // namespace fracseg
