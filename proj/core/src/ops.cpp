#include "spol/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

namespace spol::ops {

namespace {

template <typename T>
using Impl = detail::TensorImpl<T>;
template <typename T>
using ImplPtr = std::shared_ptr<Impl<T>>;
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

bool wants_grad(const auto& impl) { return impl && impl->requires_grad; }

// (N, C, S) view of `full` and whether `small` is shared across the batch.
struct ChannelBroadcast {
  std::size_t n = 0, c = 0, s = 0;
  bool shared_batch = false;
};

std::optional<ChannelBroadcast> channel_broadcast(const Shape& full, const Shape& small) {
  if (full.size() != small.size() || full.size() < 2) return std::nullopt;
  if (small[1] != full[1]) return std::nullopt;
  if (small[0] != 1 && small[0] != full[0]) return std::nullopt;
  for (std::size_t i = 2; i < small.size(); ++i) {
    if (small[i] != 1) return std::nullopt;
  }
  ChannelBroadcast b;
  b.n = full[0];
  b.c = full[1];
  b.s = shape_numel(full) / (b.n * b.c);
  b.shared_batch = small[0] == 1 && full[0] != 1;
  return b;
}

enum class BinaryKind { kAdd, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a_in, const Tensor<T>& b_in, BinaryKind kind) {
  const char* name = kind == BinaryKind::kAdd ? "add" : "mul";
  if (a_in.shape() == b_in.shape()) {
    ImplPtr<T> a = a_in.impl(), b = b_in.impl();
    const std::size_t n = a->data.size();
    std::vector<T> out(n);
    if (kind == BinaryKind::kAdd) {
      for (std::size_t i = 0; i < n; ++i) out[i] = a->data[i] + b->data[i];
    } else {
      for (std::size_t i = 0; i < n; ++i) out[i] = a->data[i] * b->data[i];
    }
    return make_result<T>(a->shape, std::move(out), {a, b}, [a, b, kind](const Impl<T>& o) {
      const std::size_t n = o.grad.size();
      if (wants_grad(a)) {
        auto& ga = a->ensure_grad();
        if (kind == BinaryKind::kAdd) {
          for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i] * b->data[i];
        }
      }
      if (wants_grad(b)) {
        auto& gb = b->ensure_grad();
        if (kind == BinaryKind::kAdd) {
          for (std::size_t i = 0; i < n; ++i) gb[i] += o.grad[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) gb[i] += o.grad[i] * a->data[i];
        }
      }
    });
  }

  // a: full operand, b: per-channel operand.
  ImplPtr<T> a = a_in.impl(), b = b_in.impl();
  auto bc = channel_broadcast(a->shape, b->shape);
  if (!bc) {
    std::swap(a, b);
    bc = channel_broadcast(a->shape, b->shape);
  }
  if (!bc) {
    throw ShapeError(std::string(name) + ": shapes " + shape_to_string(a_in.shape()) + " and " +
                     shape_to_string(b_in.shape()) +
                     " are neither equal nor per-channel broadcastable");
  }
  const ChannelBroadcast layout = *bc;
  std::vector<T> out(a->data.size());
  auto b_index = [layout](std::size_t n, std::size_t c) {
    return (layout.shared_batch ? 0 : n) * layout.c + c;
  };
  for (std::size_t n = 0; n < layout.n; ++n) {
    for (std::size_t c = 0; c < layout.c; ++c) {
      const T bv = b->data[b_index(n, c)];
      const std::size_t base = (n * layout.c + c) * layout.s;
      for (std::size_t s = 0; s < layout.s; ++s) {
        out[base + s] = kind == BinaryKind::kAdd ? a->data[base + s] + bv : a->data[base + s] * bv;
      }
    }
  }
  return make_result<T>(a->shape, std::move(out), {a, b}, [a, b, kind, layout, b_index](const Impl<T>& o) {
    const bool ga_on = wants_grad(a), gb_on = wants_grad(b);
    std::vector<T>* ga = ga_on ? &a->ensure_grad() : nullptr;
    std::vector<T>* gb = gb_on ? &b->ensure_grad() : nullptr;
    for (std::size_t n = 0; n < layout.n; ++n) {
      for (std::size_t c = 0; c < layout.c; ++c) {
        const std::size_t bi = b_index(n, c);
        const T bv = b->data[bi];
        const std::size_t base = (n * layout.c + c) * layout.s;
        T acc = 0;
        for (std::size_t s = 0; s < layout.s; ++s) {
          const T g = o.grad[base + s];
          if (kind == BinaryKind::kAdd) {
            if (ga) (*ga)[base + s] += g;
            acc += g;
          } else {
            if (ga) (*ga)[base + s] += g * bv;
            acc += g * a->data[base + s];
          }
        }
        if (gb) (*gb)[bi] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> unary(const Tensor<T>& in, auto forward, auto derivative_from_output) {
  ImplPtr<T> a = in.impl();
  std::vector<T> out(a->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(a->data[i]);
  auto out_copy = std::make_shared<std::vector<T>>(out);
  return make_result<T>(a->shape, std::move(out), {a},
                        [a, out_copy, derivative_from_output](const Impl<T>& o) {
                          auto& ga = a->ensure_grad();
                          for (std::size_t i = 0; i < ga.size(); ++i) {
                            ga[i] += o.grad[i] * derivative_from_output((*out_copy)[i], a->data[i]);
                          }
                        });
}

void require_4d(const Shape& s, const char* op) {
  if (s.size() != 4) {
    throw ShapeError(std::string(op) + ": expected a 4-D (N, C, H, W) tensor, got " +
                     shape_to_string(s));
  }
}

// Per-axis sampling table for upsampling: out index -> (i0, i1, lambda).
struct AxisTap {
  std::size_t i0, i1;
  double lambda;
};

std::vector<AxisTap> axis_taps(std::size_t in, std::size_t out, UpsampleMode mode) {
  std::vector<AxisTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    if (mode == UpsampleMode::kNearest) {
      const std::size_t i = std::min(static_cast<std::size_t>(std::floor(o * ratio)), in - 1);
      taps[o] = {i, i, 0.0};
      continue;
    }
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T y, T) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T, T x) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(
      a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> elementwise(ElementwiseKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  switch (kind) {
    case ElementwiseKind::kAdd:
    case ElementwiseKind::kMul:
      if (!b.defined()) throw ShapeError("elementwise: binary op needs a second operand");
      return kind == ElementwiseKind::kAdd ? add(a, b) : mul(a, b);
    case ElementwiseKind::kSigmoid:
      return sigmoid(a);
    case ElementwiseKind::kRelu:
      return relu(a);
  }
  throw std::invalid_argument("elementwise: unknown kind");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& in) {
  ImplPtr<T> a = in.impl();
  double acc = 0;
  for (T v : a->data) acc += v;
  return make_result<T>(Shape{1}, {static_cast<T>(acc)}, {a}, [a](const Impl<T>& o) {
    auto& ga = a->ensure_grad();
    for (T& g : ga) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& in) {
  ImplPtr<T> a = in.impl();
  double acc = 0;
  for (T v : a->data) acc += v;
  const T inv = T(1) / static_cast<T>(a->data.size());
  return make_result<T>(Shape{1}, {static_cast<T>(acc / static_cast<double>(a->data.size()))}, {a},
                        [a, inv](const Impl<T>& o) {
                          auto& ga = a->ensure_grad();
                          for (T& g : ga) g += o.grad[0] * inv;
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& in, Shape shape) {
  ImplPtr<T> a = in.impl();
  if (shape_numel(shape) != a->data.size()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(a->shape) + " as " +
                     shape_to_string(shape));
  }
  return make_result<T>(std::move(shape), a->data, {a}, [a](const Impl<T>& o) {
    auto& ga = a->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad) {
  require_4d(input.shape(), "conv2d input");
  require_4d(kernel.shape(), "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) throw ShapeError("conv2d: pad must be >= 0, got " + std::to_string(pad));
  ImplPtr<T> x = input.impl(), k = kernel.impl();
  const std::size_t n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
  const std::size_t oc = k->shape[0], kh = k->shape[2], kw = k->shape[3];
  if (k->shape[1] != c) {
    throw ShapeError("conv2d: kernel " + shape_to_string(k->shape) + " expects " +
                     std::to_string(k->shape[1]) + " input channels, input " +
                     shape_to_string(x->shape) + " has " + std::to_string(c));
  }
  const long long oh_num = static_cast<long long>(h) + 2LL * pad - static_cast<long long>(kh);
  const long long ow_num = static_cast<long long>(w) + 2LL * pad - static_cast<long long>(kw);
  if (oh_num < 0 || ow_num < 0) {
    throw ShapeError("conv2d: kernel " + shape_to_string(k->shape) + " with pad " +
                     std::to_string(pad) + " does not fit input " + shape_to_string(x->shape));
  }
  const std::size_t oh = static_cast<std::size_t>(oh_num / stride + 1);
  const std::size_t ow = static_cast<std::size_t>(ow_num / stride + 1);
  const std::size_t patch = c * kh * kw;
  const std::size_t positions = oh * ow;

  auto cols = std::make_shared<std::vector<T>>(n * patch * positions, T(0));
  for (std::size_t b = 0; b < n; ++b) {
    T* col = cols->data() + b * patch * positions;
    const T* img = x->data.data() + b * c * h * w;
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T* row = col + ((ci * kh + ky) * kw + kx) * positions;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long long iy = static_cast<long long>(oy * stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<long long>(h)) continue;
            const T* src = img + (ci * h + static_cast<std::size_t>(iy)) * w;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long long ix = static_cast<long long>(ox * stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<long long>(w)) continue;
              row[oy * ow + ox] = src[ix];
            }
          }
        }
      }
    }
  }

  std::vector<T> out(n * oc * positions);
  ConstMatMap<T> kmat(k->data.data(), oc, patch);
  for (std::size_t b = 0; b < n; ++b) {
    ConstMatMap<T> col(cols->data() + b * patch * positions, patch, positions);
    MatMap<T> dst(out.data() + b * oc * positions, oc, positions);
    dst.noalias() = kmat * col;
  }

  return make_result<T>(
      Shape{n, oc, oh, ow}, std::move(out), {x, k},
      [x, k, cols, n, c, h, w, oc, kh, kw, oh, ow, stride, pad, patch, positions](const Impl<T>& o) {
        const bool need_x = wants_grad(x), need_k = wants_grad(k);
        ConstMatMap<T> kmat(k->data.data(), oc, patch);
        std::vector<T> dcol(need_x ? patch * positions : 0);
        for (std::size_t b = 0; b < n; ++b) {
          ConstMatMap<T> gout(o.grad.data() + b * oc * positions, oc, positions);
          ConstMatMap<T> col(cols->data() + b * patch * positions, patch, positions);
          if (need_k) {
            MatMap<T> gk(k->ensure_grad().data(), oc, patch);
            gk.noalias() += gout * col.transpose();
          }
          if (!need_x) continue;
          MatMap<T> dcm(dcol.data(), patch, positions);
          dcm.noalias() = kmat.transpose() * gout;
          T* gimg = x->ensure_grad().data() + b * c * h * w;
          for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const T* row = dcol.data() + ((ci * kh + ky) * kw + kx) * positions;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const long long iy = static_cast<long long>(oy * stride + ky) - pad;
                  if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                  T* dst = gimg + (ci * h + static_cast<std::size_t>(iy)) * w;
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const long long ix = static_cast<long long>(ox * stride + kx) - pad;
                    if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                    dst[ix] += row[oy * ow + ox];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& t) {
  require_4d(t.shape(), "global_avg_pool");
  ImplPtr<T> a = t.impl();
  const std::size_t n = a->shape[0], c = a->shape[1], hw = a->shape[2] * a->shape[3];
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0;
    const T* src = a->data.data() + i * hw;
    for (std::size_t s = 0; s < hw; ++s) acc += src[s];
    out[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return make_result<T>(Shape{n, c, 1, 1}, std::move(out), {a}, [a, n, c, hw](const Impl<T>& o) {
    auto& ga = a->ensure_grad();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      const T g = o.grad[i] * inv;
      T* dst = ga.data() + i * hw;
      for (std::size_t s = 0; s < hw; ++s) dst[s] += g;
    }
  });
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& t, std::size_t out_h, std::size_t out_w, UpsampleMode mode) {
  require_4d(t.shape(), "upsample");
  ImplPtr<T> a = t.impl();
  const std::size_t n = a->shape[0], c = a->shape[1], h = a->shape[2], w = a->shape[3];
  if (out_h < h || out_w < w) {
    throw ShapeError("upsample: requested " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " is smaller than input " + shape_to_string(a->shape) +
                     "; downsampling is not supported");
  }
  auto ty = std::make_shared<std::vector<AxisTap>>(axis_taps(h, out_h, mode));
  auto tx = std::make_shared<std::vector<AxisTap>>(axis_taps(w, out_w, mode));
  std::vector<T> out(n * c * out_h * out_w);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = a->data.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const AxisTap& y = (*ty)[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const AxisTap& x = (*tx)[ox];
        const double top = (1 - x.lambda) * src[y.i0 * w + x.i0] + x.lambda * src[y.i0 * w + x.i1];
        const double bot = (1 - x.lambda) * src[y.i1 * w + x.i0] + x.lambda * src[y.i1 * w + x.i1];
        dst[oy * out_w + ox] = static_cast<T>((1 - y.lambda) * top + y.lambda * bot);
      }
    }
  }
  return make_result<T>(Shape{n, c, out_h, out_w}, std::move(out), {a},
                        [a, ty, tx, n, c, h, w, out_h, out_w](const Impl<T>& o) {
                          auto& ga = a->ensure_grad();
                          for (std::size_t p = 0; p < n * c; ++p) {
                            T* dst = ga.data() + p * h * w;
                            const T* g = o.grad.data() + p * out_h * out_w;
                            for (std::size_t oy = 0; oy < out_h; ++oy) {
                              const AxisTap& y = (*ty)[oy];
                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                const AxisTap& x = (*tx)[ox];
                                const double v = g[oy * out_w + ox];
                                dst[y.i0 * w + x.i0] += static_cast<T>(v * (1 - y.lambda) * (1 - x.lambda));
                                dst[y.i0 * w + x.i1] += static_cast<T>(v * (1 - y.lambda) * x.lambda);
                                dst[y.i1 * w + x.i0] += static_cast<T>(v * y.lambda * (1 - x.lambda));
                                dst[y.i1 * w + x.i1] += static_cast<T>(v * y.lambda * x.lambda);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x_in, const Tensor<T>& weight, const Tensor<T>& bias) {
  ImplPtr<T> x = x_in.impl(), wt = weight.impl();
  ImplPtr<T> b = bias.defined() ? bias.impl() : nullptr;
  if (x->shape.size() != 2 || wt->shape.size() != 2 || x->shape[1] != wt->shape[1]) {
    throw ShapeError("linear: input " + shape_to_string(x->shape) + " incompatible with weight " +
                     shape_to_string(wt->shape));
  }
  const std::size_t n = x->shape[0], in = x->shape[1], out_dim = wt->shape[0];
  if (b && (b->shape.size() != 1 || b->shape[0] != out_dim)) {
    throw ShapeError("linear: bias " + shape_to_string(b->shape) + " does not match " +
                     std::to_string(out_dim) + " outputs");
  }
  std::vector<T> out(n * out_dim);
  {
    ConstMatMap<T> xm(x->data.data(), n, in);
    ConstMatMap<T> wm(wt->data.data(), out_dim, in);
    MatMap<T> om(out.data(), n, out_dim);
    om.noalias() = xm * wm.transpose();
    if (b) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += b->data[j];
      }
    }
  }
  return make_result<T>(Shape{n, out_dim}, std::move(out), {x, wt, b},
                        [x, wt, b, n, in, out_dim](const Impl<T>& o) {
                          ConstMatMap<T> gm(o.grad.data(), n, out_dim);
                          if (wants_grad(x)) {
                            MatMap<T> gx(x->ensure_grad().data(), n, in);
                            ConstMatMap<T> wm(wt->data.data(), out_dim, in);
                            gx.noalias() += gm * wm;
                          }
                          if (wants_grad(wt)) {
                            MatMap<T> gw(wt->ensure_grad().data(), out_dim, in);
                            ConstMatMap<T> xm(x->data.data(), n, in);
                            gw.noalias() += gm.transpose() * xm;
                          }
                          if (wants_grad(b)) {
                            auto& gb = b->ensure_grad();
                            for (std::size_t r = 0; r < n; ++r) {
                              for (std::size_t j = 0; j < out_dim; ++j) gb[j] += o.grad[r * out_dim + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  std::vector<ImplPtr<T>> impls;
  std::vector<std::size_t> channels;
  const Shape& first = parts.front().shape();
  require_4d(first, "concat_channels");
  std::size_t total_c = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require_4d(s, "concat_channels");
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw ShapeError("concat_channels: " + shape_to_string(s) + " does not match " +
                       shape_to_string(first) + " outside the channel dim");
    }
    impls.push_back(p.impl());
    channels.push_back(s[1]);
    total_c += s[1];
  }
  const std::size_t n = first[0], hw = first[2] * first[3];
  std::vector<T> out(n * total_c * hw);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < impls.size(); ++i) {
      const std::size_t block = channels[i] * hw;
      std::copy_n(impls[i]->data.data() + b * block, block, out.data() + (b * total_c + offset) * hw);
      offset += channels[i];
    }
  }
  return make_result<T>(Shape{n, total_c, first[2], first[3]}, std::move(out), impls,
                        [impls, channels, n, total_c, hw](const Impl<T>& o) {
                          for (std::size_t b = 0; b < n; ++b) {
                            std::size_t offset = 0;
                            for (std::size_t i = 0; i < impls.size(); ++i) {
                              const std::size_t block = channels[i] * hw;
                              if (wants_grad(impls[i])) {
                                T* dst = impls[i]->ensure_grad().data() + b * block;
                                const T* src = o.grad.data() + (b * total_c + offset) * hw;
                                for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
                              }
                              offset += channels[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  ImplPtr<T> a = logits.impl();
  if (a->shape.size() != 2 || a->shape[0] != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_to_string(a->shape) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = a->shape[0], k = a->shape[1];
  auto probs = std::make_shared<std::vector<T>>(n * k);
  std::vector<int> label_copy(labels.begin(), labels.end());
  double loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = label_copy[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    const T* row = a->data.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[r * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
    loss += std::log(z) - static_cast<double>(row[y] - mx);
  }
  loss /= static_cast<double>(n);
  return make_result<T>(Shape{1}, {static_cast<T>(loss)}, {a},
                        [a, probs, label_copy, n, k](const Impl<T>& o) {
                          auto& ga = a->ensure_grad();
                          const T g = o.grad[0] / static_cast<T>(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t j = 0; j < k; ++j) {
                              const T onehot = static_cast<int>(j) == label_copy[r] ? T(1) : T(0);
                              ga[r * k + j] += g * ((*probs)[r * k + j] - onehot);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> masked_bce(const Tensor<T>& prob, std::span<const T> target, std::span<const T> weight, T eps) {
  ImplPtr<T> p = prob.impl();
  const std::size_t total = p->data.size();
  if (target.size() != total || weight.size() != total || p->shape.empty()) {
    throw ShapeError("masked_bce: prediction " + shape_to_string(p->shape) + " has " +
                     std::to_string(total) + " values, target " + std::to_string(target.size()) +
                     ", weight " + std::to_string(weight.size()));
  }
  const std::size_t n = p->shape[0];
  const std::size_t per_image = total / n;
  auto g = std::make_shared<std::vector<T>>(target.begin(), target.end());
  auto w = std::make_shared<std::vector<T>>(weight.begin(), weight.end());
  double loss = 0;
  for (std::size_t b = 0; b < n; ++b) {
    double acc = 0;
    for (std::size_t i = b * per_image; i < (b + 1) * per_image; ++i) {
      if ((*w)[i] == T(0)) continue;
      const double pc = std::clamp<double>(p->data[i], eps, 1.0 - eps);
      acc += (*w)[i] * ((*g)[i] * std::log(pc) + (1.0 - (*g)[i]) * std::log(1.0 - pc));
    }
    loss += -acc / static_cast<double>(per_image);
  }
  loss /= static_cast<double>(n);
  return make_result<T>(Shape{1}, {static_cast<T>(loss)}, {p},
                        [p, g, w, n, per_image, eps](const Impl<T>& o) {
                          auto& gp = p->ensure_grad();
                          const double scale_factor = o.grad[0] / static_cast<double>(n * per_image);
                          for (std::size_t i = 0; i < gp.size(); ++i) {
                            if ((*w)[i] == T(0)) continue;
                            const double pv = p->data[i];
                            if (pv < eps || pv > 1.0 - eps) continue;
                            const double gi = (*g)[i];
                            const double d = -(*w)[i] * (gi / pv - (1.0 - gi) / (1.0 - pv));
                            gp[i] += static_cast<T>(scale_factor * d);
                          }
                        });
}

#define SPOL_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> elementwise(ElementwiseKind, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);                   \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                      \
  template Tensor<T> upsample(const Tensor<T>&, std::size_t, std::size_t, UpsampleMode);     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                         \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                  \
  template Tensor<T> masked_bce(const Tensor<T>&, std::span<const T>, std::span<const T>, T);

SPOL_INSTANTIATE_OPS(float)
SPOL_INSTANTIATE_OPS(double)

#undef SPOL_INSTANTIATE_OPS

}  // namespace spol::ops
