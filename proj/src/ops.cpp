#include "gode/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gode/error.hpp"

namespace gode {
namespace {

template <typename T>
using NodePtr = detail::NodePtr<T>;

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using ConstMap = Eigen::Map<const MatRM<T>>;

template <typename T>
using MutMap = Eigen::Map<MatRM<T>>;

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

void require_defined(std::string_view op, bool defined) {
  if (!defined) throw ShapeError(std::string(op) + ": undefined tensor argument");
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

Broadcast broadcast(std::string_view op, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank - a.size(), 1), pb(rank - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  bc.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_mismatch(op, a, b);
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  const auto sa = strides_of(pa);
  const auto sb = strides_of(pb);
  bc.stride_a.resize(rank);
  bc.stride_b.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    bc.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    bc.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t n = numel(bc.out);
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = bc.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += bc.stride_a[ax];
      ib += bc.stride_b[ax];
      if (idx[ax] < bc.out[ax]) break;
      ia -= bc.stride_a[ax] * idx[ax];
      ib -= bc.stride_b[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

// fwd(x, y) -> value; bwd(x, y, out, g, ga, gb) accumulates partials.
template <typename T, class Fwd, class Bwd>
Tensor<T> binary(std::string_view op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  require_defined(op, a.defined() && b.defined());
  auto bc = broadcast(op, a.shape(), b.shape());
  std::vector<T> out(numel(bc.out));
  const auto av = a.values();
  const auto bv = b.values();
  for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = fwd(av[ia], bv[ib]);
  });
  NodePtr<T> na = a.node(), nb = b.node();
  Shape out_shape = bc.out;
  return detail::make_result<T>(
      op, std::move(out_shape), std::move(out), {na, nb},
      [na, nb, bc = std::move(bc), bwd](detail::Node<T>& o) {
        const bool wa = na->requires_grad, wb = nb->requires_grad;
        T dummy_a = 0, dummy_b = 0;
        auto ga = wa ? na->grad_buffer() : std::span<T>();
        auto gb = wb ? nb->grad_buffer() : std::span<T>();
        for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          T& ra = wa ? ga[ia] : dummy_a;
          T& rb = wb ? gb[ib] : dummy_b;
          bwd(na->values[ia], nb->values[ib], o.values[i], o.grad[i], ra, rb);
        });
      });
}

template <typename T, class Fwd, class Bwd>
Tensor<T> unary(std::string_view op, const Tensor<T>& a, Fwd fwd, Bwd bwd) {
  require_defined(op, a.defined());
  const auto av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  NodePtr<T> na = a.node();
  return detail::make_result<T>(op, a.shape(), std::move(out), {na},
                                [na, bwd](detail::Node<T>& o) {
                                  auto ga = na->grad_buffer();
                                  for (std::size_t i = 0; i < ga.size(); ++i) {
                                    ga[i] += bwd(na->values[i], o.values[i], o.grad[i]);
                                  }
                                });
}

std::size_t product(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T g, T& ga, T& gb) {
        ga += g;
        gb += g;
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T g, T& ga, T& gb) {
        ga += g;
        gb -= g;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T, T g, T& ga, T& gb) {
        ga += g * y;
        gb += g * x;
      });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T, T g, T& ga, T& gb) {
        if (x >= y) {
          ga += g;
        } else {
          gb += g;
        }
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T b) {
  return unary<T>(
      "add_scalar", a, [b](T x) { return x + b; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      "scale", a, [factor](T x) { return factor * x; },
      [factor](T, T, T g) { return factor * g; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined("matmul", a.defined() && b.defined());
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_mismatch("matmul", a.shape(), b.shape());
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.values().data(), m, k) * ConstMap<T>(b.values().data(), k, n);
  NodePtr<T> na = a.node(), nb = b.node();
  return detail::make_result<T>(
      "matmul", {m, n}, std::move(out), {na, nb}, [na, nb, m, k, n](detail::Node<T>& o) {
        ConstMap<T> g(o.grad.data(), m, n);
        if (na->requires_grad) {
          MutMap<T>(na->grad_buffer().data(), m, k).noalias() +=
              g * ConstMap<T>(nb->values.data(), k, n).transpose();
        }
        if (nb->requires_grad) {
          MutMap<T>(nb->grad_buffer().data(), k, n).noalias() +=
              ConstMap<T>(na->values.data(), m, k).transpose() * g;
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require_defined("reshape", a.defined());
  if (numel(shape) != a.numel()) shape_mismatch("reshape", a.shape(), shape);
  std::vector<T> out(a.values().begin(), a.values().end());
  NodePtr<T> na = a.node();
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {na},
                                [na](detail::Node<T>& o) {
                                  auto ga = na->grad_buffer();
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
                                });
}

template <typename T>
Tensor<T> pad(const Tensor<T>& a,
              const std::vector<std::pair<std::size_t, std::size_t>>& widths) {
  require_defined("pad", a.defined());
  if (widths.size() != a.rank()) {
    throw ShapeError("pad: expected " + std::to_string(a.rank()) + " width pairs, got " +
                     std::to_string(widths.size()));
  }
  Shape out_shape = a.shape();
  for (std::size_t i = 0; i < out_shape.size(); ++i) {
    out_shape[i] += widths[i].first + widths[i].second;
  }
  const auto in_strides = strides_of(a.shape());
  const auto out_strides = strides_of(out_shape);
  // Output offset of every input element.
  std::vector<std::size_t> map(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    std::size_t rem = i, off = 0;
    for (std::size_t ax = 0; ax < a.rank(); ++ax) {
      const auto idx = rem / in_strides[ax];
      rem %= in_strides[ax];
      off += (idx + widths[ax].first) * out_strides[ax];
    }
    map[i] = off;
  }
  std::vector<T> out(numel(out_shape), T(0));
  const auto av = a.values();
  for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] = av[i];
  NodePtr<T> na = a.node();
  return detail::make_result<T>("pad", std::move(out_shape), std::move(out), {na},
                                [na, map = std::move(map)](detail::Node<T>& o) {
                                  auto ga = na->grad_buffer();
                                  for (std::size_t i = 0; i < map.size(); ++i) {
                                    ga[i] += o.grad[map[i]];
                                  }
                                });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined("slice", a.defined());
  if (axis >= a.rank() || length == 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") on axis " + std::to_string(axis) +
                     " out of bounds for shape " + to_string(a.shape()));
  }
  const auto outer = product(a.shape(), 0, axis);
  const auto inner = product(a.shape(), axis + 1, a.rank());
  const auto extent = a.dim(axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<T> out(outer * length * inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner),
                length * inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  }
  NodePtr<T> na = a.node();
  return detail::make_result<T>(
      "slice", std::move(out_shape), std::move(out), {na},
      [na, outer, inner, extent, start, length](detail::Node<T>& o) {
        auto ga = na->grad_buffer();
        for (std::size_t b = 0; b < outer; ++b) {
          for (std::size_t j = 0; j < length * inner; ++j) {
            ga[(b * extent + start) * inner + j] += o.grad[b * length * inner + j];
          }
        }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined("concat", p.defined());
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + to_string(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) shape_mismatch("concat", ref, s);
    out_shape[axis] += s[axis];
  }
  const auto outer = product(ref, 0, axis);
  const auto inner = product(ref, axis + 1, ref.size());
  const auto total = out_shape[axis];
  std::vector<T> out(numel(out_shape));
  std::vector<NodePtr<T>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto ext = p.dim(axis);
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * ext * inner), ext * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    }
    nodes.push_back(p.node());
    offsets.push_back(offset);
    offset += ext;
  }
  auto inputs = nodes;
  return detail::make_result<T>(
      "concat", std::move(out_shape), std::move(out), std::move(inputs),
      [nodes, offsets, outer, inner, total, axis](detail::Node<T>& o) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          if (!nodes[k]->requires_grad) continue;
          const auto ext = nodes[k]->shape[axis];
          auto g = nodes[k]->grad_buffer();
          for (std::size_t b = 0; b < outer; ++b) {
            for (std::size_t j = 0; j < ext * inner; ++j) {
              g[b * ext * inner + j] += o.grad[(b * total + offsets[k]) * inner + j];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a) {
  require_defined("reduce_sum", a.defined());
  T s = 0;
  for (auto v : a.values()) s += v;
  NodePtr<T> na = a.node();
  return detail::make_result<T>("reduce_sum", {1}, {s}, {na}, [na](detail::Node<T>& o) {
    auto ga = na->grad_buffer();
    for (auto& g : ga) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::size_t axis) {
  require_defined("reduce_sum", a.defined());
  if (axis >= a.rank()) throw ShapeError("reduce_sum: axis out of range for " + to_string(a.shape()));
  const auto outer = product(a.shape(), 0, axis);
  const auto inner = product(a.shape(), axis + 1, a.rank());
  const auto extent = a.dim(axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(outer * inner, T(0));
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * extent + e) * inner + i];
    }
  }
  NodePtr<T> na = a.node();
  return detail::make_result<T>("reduce_sum", std::move(out_shape), std::move(out), {na},
                                [na, outer, inner, extent](detail::Node<T>& o) {
                                  auto ga = na->grad_buffer();
                                  for (std::size_t b = 0; b < outer; ++b) {
                                    for (std::size_t e = 0; e < extent; ++e) {
                                      for (std::size_t i = 0; i < inner; ++i) {
                                        ga[(b * extent + e) * inner + i] += o.grad[b * inner + i];
                                      }
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
  return scale(reduce_sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("reduce_mean: axis out of range for " + to_string(a.shape()));
  return scale(reduce_sum(a, axis), T(1) / static_cast<T>(a.dim(axis)));
}

template <typename T>
Tensor<T> lincomb(const Tensor<T>& base, const std::vector<Tensor<T>>& terms,
                  std::span<const double> coeffs) {
  require_defined("lincomb", base.defined());
  if (terms.size() != coeffs.size()) {
    throw ShapeError("lincomb: " + std::to_string(terms.size()) + " terms but " +
                     std::to_string(coeffs.size()) + " coefficients");
  }
  std::vector<T> out(base.values().begin(), base.values().end());
  std::vector<NodePtr<T>> inputs{base.node()};
  std::vector<T> cs;
  for (std::size_t j = 0; j < terms.size(); ++j) {
    require_defined("lincomb", terms[j].defined());
    if (terms[j].shape() != base.shape()) shape_mismatch("lincomb", base.shape(), terms[j].shape());
    const T c = static_cast<T>(coeffs[j]);
    const auto tv = terms[j].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * tv[i];
    inputs.push_back(terms[j].node());
    cs.push_back(c);
  }
  auto nodes = inputs;
  return detail::make_result<T>("lincomb", base.shape(), std::move(out), std::move(inputs),
                                [nodes, cs](detail::Node<T>& o) {
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    if (!nodes[k]->requires_grad) continue;
                                    const T c = k == 0 ? T(1) : cs[k - 1];
                                    auto g = nodes[k]->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * o.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms, std::span<const double> weights) {
  if (terms.empty()) throw ShapeError("weighted_sum: no terms");
  if (terms.size() != weights.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(terms.size()) + " terms but " +
                     std::to_string(weights.size()) + " weights");
  }
  for (const auto& t : terms) {
    require_defined("weighted_sum", t.defined());
    if (t.shape() != terms.front().shape()) {
      shape_mismatch("weighted_sum", terms.front().shape(), t.shape());
    }
  }
  std::vector<T> out(terms.front().numel(), T(0));
  std::vector<NodePtr<T>> inputs;
  std::vector<T> ws;
  for (std::size_t j = 0; j < terms.size(); ++j) {
    const T w = static_cast<T>(weights[j]);
    inputs.push_back(terms[j].node());
    ws.push_back(w);
    if (w == T(0)) continue;
    const auto tv = terms[j].values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * tv[i];
  }
  auto nodes = inputs;
  return detail::make_result<T>("weighted_sum", terms.front().shape(), std::move(out),
                                std::move(inputs), [nodes, ws](detail::Node<T>& o) {
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    if (!nodes[k]->requires_grad || ws[k] == T(0)) continue;
                                    auto g = nodes[k]->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) {
                                      g[i] += ws[k] * o.grad[i];
                                    }
                                  }
                                });
}

namespace {

struct ConvGeometry {
  std::size_t n, c_in, h, w, c_out, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return c_in * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

// Fills cols [K, count * P] for samples [first, first + count).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, std::size_t first, std::size_t count, T* cols) {
  const std::size_t P = g.p();
  const std::size_t width = count * P;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * width;
        for (std::size_t s = 0; s < count; ++s) {
          const T* plane = x + ((first + s) * g.c_in + ci) * g.h * g.w;
          T* dst = row + s * P;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                  ix < static_cast<std::ptrdiff_t>(g.w);
              dst[oy * g.wo + ox] = inside ? plane[iy * static_cast<std::ptrdiff_t>(g.w) + ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, std::size_t first, std::size_t count, T* dx) {
  const std::size_t P = g.p();
  const std::size_t width = count * P;
  for (std::size_t ci = 0; ci < g.c_in; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((ci * g.kh + ky) * g.kw + kx) * width;
        for (std::size_t s = 0; s < count; ++s) {
          T* plane = dx + ((first + s) * g.c_in + ci) * g.h * g.w;
          const T* src = row + s * P;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              plane[iy * static_cast<std::ptrdiff_t>(g.w) + ix] += src[oy * g.wo + ox];
            }
          }
        }
      }
    }
  }
}

// Samples per im2col chunk, bounding the column buffer to ~4M elements.
std::size_t chunk_size(const ConvGeometry& g) {
  constexpr std::size_t kBudget = std::size_t{1} << 22;
  return std::clamp<std::size_t>(kBudget / std::max<std::size_t>(1, g.k() * g.p()), 1, g.n);
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 Conv2dOptions options) {
  require_defined("conv2d", x.defined() && kernel.defined());
  if (x.rank() != 4 || kernel.rank() != 4) shape_mismatch("conv2d", x.shape(), kernel.shape());
  if (x.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) +
                     " channels but kernel " + to_string(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)));
  }
  if (options.stride == 0) throw ConfigError("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2),      x.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), options.stride, options.padding, 0, 0};
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " smaller than kernel " +
                     to_string(kernel.shape()) + " after padding " + std::to_string(g.pad));
  }
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.c_out)) {
    shape_mismatch("conv2d(bias)", kernel.shape(), bias.shape());
  }

  const std::size_t K = g.k(), P = g.p();
  const std::size_t chunk = chunk_size(g);
  std::vector<T> out(g.n * g.c_out * P);
  std::vector<T> cols(K * chunk * P);
  std::vector<T> tmp(g.c_out * chunk * P);
  ConstMap<T> W(kernel.values().data(), g.c_out, K);
  for (std::size_t first = 0; first < g.n; first += chunk) {
    const std::size_t count = std::min(chunk, g.n - first);
    im2col(g, x.values().data(), first, count, cols.data());
    MutMap<T> Y(tmp.data(), g.c_out, count * P);
    Y.noalias() = W * ConstMap<T>(cols.data(), K, count * P);
    for (std::size_t s = 0; s < count; ++s) {
      for (std::size_t co = 0; co < g.c_out; ++co) {
        const T b = bias.defined() ? bias[co] : T(0);
        T* dst = out.data() + ((first + s) * g.c_out + co) * P;
        const T* src = tmp.data() + co * count * P + s * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
    }
  }

  NodePtr<T> nx = x.node(), nk = kernel.node(), nb = bias.defined() ? bias.node() : nullptr;
  std::vector<NodePtr<T>> inputs{nx, nk};
  if (nb) inputs.push_back(nb);
  return detail::make_result<T>(
      "conv2d", {g.n, g.c_out, g.ho, g.wo}, std::move(out), std::move(inputs),
      [nx, nk, nb, g, chunk](detail::Node<T>& o) {
        const std::size_t K = g.k(), P = g.p();
        if (nb && nb->requires_grad) {
          auto gb = nb->grad_buffer();
          for (std::size_t s = 0; s < g.n; ++s) {
            for (std::size_t co = 0; co < g.c_out; ++co) {
              const T* src = o.grad.data() + (s * g.c_out + co) * P;
              T acc = 0;
              for (std::size_t p = 0; p < P; ++p) acc += src[p];
              gb[co] += acc;
            }
          }
        }
        const bool want_k = nk->requires_grad, want_x = nx->requires_grad;
        if (!want_k && !want_x) return;
        std::vector<T> cols(K * chunk * P);
        std::vector<T> gy(g.c_out * chunk * P);
        ConstMap<T> W(nk->values.data(), g.c_out, K);
        for (std::size_t first = 0; first < g.n; first += chunk) {
          const std::size_t count = std::min(chunk, g.n - first);
          for (std::size_t s = 0; s < count; ++s) {
            for (std::size_t co = 0; co < g.c_out; ++co) {
              std::copy_n(o.grad.data() + ((first + s) * g.c_out + co) * P, P,
                          gy.data() + co * count * P + s * P);
            }
          }
          ConstMap<T> G(gy.data(), g.c_out, count * P);
          if (want_k) {
            im2col(g, nx->values.data(), first, count, cols.data());
            MutMap<T>(nk->grad_buffer().data(), g.c_out, K).noalias() +=
                G * ConstMap<T>(cols.data(), K, count * P).transpose();
          }
          if (want_x) {
            MutMap<T>(cols.data(), K, count * P).noalias() = W.transpose() * G;
            col2im_add(g, cols.data(), first, count, nx->grad_buffer().data());
          }
        }
      });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& scale,
                     const Tensor<T>& shift, double epsilon) {
  require_defined("group_norm", x.defined() && scale.defined() && shift.defined());
  if (x.rank() < 2) throw ShapeError("group_norm: input " + to_string(x.shape()) + " needs rank >= 2");
  const std::size_t N = x.dim(0), C = x.dim(1);
  if (groups == 0 || C % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (scale.numel() != C || shift.numel() != C) {
    shape_mismatch("group_norm(affine)", scale.shape(), shift.shape());
  }
  const std::size_t inner = x.numel() / (N * C);
  const std::size_t per_group = C / groups;
  const std::size_t M = per_group * inner;
  const auto xv = x.values();
  const auto gv = scale.values();
  const auto bv = shift.values();
  std::vector<T> out(x.numel());
  std::vector<double> mean(N * groups), rstd(N * groups);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (n * C + gi * per_group) * inner;
      double s = 0;
      for (std::size_t i = 0; i < M; ++i) s += xv[base + i];
      const double mu = s / static_cast<double>(M);
      double v = 0;
      for (std::size_t i = 0; i < M; ++i) {
        const double d = xv[base + i] - mu;
        v += d * d;
      }
      const double r = 1.0 / std::sqrt(v / static_cast<double>(M) + epsilon);
      mean[n * groups + gi] = mu;
      rstd[n * groups + gi] = r;
      for (std::size_t c = 0; c < per_group; ++c) {
        const std::size_t ch = gi * per_group + c;
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t idx = base + c * inner + i;
          out[idx] = static_cast<T>((xv[idx] - mu) * r) * gv[ch] + bv[ch];
        }
      }
    }
  }
  NodePtr<T> nx = x.node(), ng = scale.node(), nb = shift.node();
  return detail::make_result<T>(
      "group_norm", x.shape(), std::move(out), {nx, ng, nb},
      [nx, ng, nb, N, C, groups, per_group, inner, M, mean = std::move(mean),
       rstd = std::move(rstd)](detail::Node<T>& o) {
        const auto& xv = nx->values;
        const auto& gv = ng->values;
        auto gx = nx->requires_grad ? nx->grad_buffer() : std::span<T>();
        auto gg = ng->requires_grad ? ng->grad_buffer() : std::span<T>();
        auto gb = nb->requires_grad ? nb->grad_buffer() : std::span<T>();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (n * C + gi * per_group) * inner;
            const double mu = mean[n * groups + gi], r = rstd[n * groups + gi];
            double sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t c = 0; c < per_group; ++c) {
              const std::size_t ch = gi * per_group + c;
              double acc_g = 0, acc_b = 0;
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = base + c * inner + i;
                const double xhat = (xv[idx] - mu) * r;
                const double dy = o.grad[idx];
                acc_g += dy * xhat;
                acc_b += dy;
                const double dxhat = dy * gv[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
              }
              if (!gg.empty()) gg[ch] += static_cast<T>(acc_g);
              if (!gb.empty()) gb[ch] += static_cast<T>(acc_b);
            }
            if (gx.empty()) continue;
            const double m = static_cast<double>(M);
            for (std::size_t c = 0; c < per_group; ++c) {
              const std::size_t ch = gi * per_group + c;
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = base + c * inner + i;
                const double xhat = (xv[idx] - mu) * r;
                const double dxhat = o.grad[idx] * gv[ch];
                gx[idx] += static_cast<T>(r / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> avgpool_global(const Tensor<T>& x) {
  require_defined("avgpool_global", x.defined());
  if (x.rank() != 4) throw ShapeError("avgpool_global: expected [N, C, H, W], got " + to_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<T> out(N * C);
  for (std::size_t i = 0; i < N * C; ++i) {
    T s = 0;
    for (std::size_t p = 0; p < HW; ++p) s += xv[i * HW + p];
    out[i] = s / static_cast<T>(HW);
  }
  NodePtr<T> nx = x.node();
  return detail::make_result<T>("avgpool_global", {N, C}, std::move(out), {nx},
                                [nx, N, C, HW](detail::Node<T>& o) {
                                  auto gx = nx->grad_buffer();
                                  const T inv = T(1) / static_cast<T>(HW);
                                  for (std::size_t i = 0; i < N * C; ++i) {
                                    const T g = o.grad[i] * inv;
                                    for (std::size_t p = 0; p < HW; ++p) gx[i * HW + p] += g;
                                  }
                                });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_defined("linear", x.defined() && weight.defined() && bias.defined());
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    shape_mismatch("linear", x.shape(), weight.shape());
  }
  const std::size_t N = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (bias.numel() != out_dim) shape_mismatch("linear(bias)", weight.shape(), bias.shape());
  std::vector<T> out(N * out_dim);
  MutMap<T> Y(out.data(), N, out_dim);
  Y.noalias() = ConstMap<T>(x.values().data(), N, in) *
                ConstMap<T>(weight.values().data(), out_dim, in).transpose();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < out_dim; ++j) out[n * out_dim + j] += bias[j];
  }
  NodePtr<T> nx = x.node(), nw = weight.node(), nb = bias.node();
  return detail::make_result<T>(
      "linear", {N, out_dim}, std::move(out), {nx, nw, nb},
      [nx, nw, nb, N, in, out_dim](detail::Node<T>& o) {
        ConstMap<T> G(o.grad.data(), N, out_dim);
        if (nx->requires_grad) {
          MutMap<T>(nx->grad_buffer().data(), N, in).noalias() +=
              G * ConstMap<T>(nw->values.data(), out_dim, in);
        }
        if (nw->requires_grad) {
          MutMap<T>(nw->grad_buffer().data(), out_dim, in).noalias() +=
              G.transpose() * ConstMap<T>(nx->values.data(), N, in);
        }
        if (nb->requires_grad) {
          auto gb = nb->grad_buffer();
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t j = 0; j < out_dim; ++j) gb[j] += o.grad[n * out_dim + j];
          }
        }
      });
}

namespace {

template <typename T>
void row_log_softmax(const T* row, std::size_t K, T* dst) {
  T mx = row[0];
  for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
  double s = 0;
  for (std::size_t j = 0; j < K; ++j) s += std::exp(static_cast<double>(row[j] - mx));
  const T lse = mx + static_cast<T>(std::log(s));
  for (std::size_t j = 0; j < K; ++j) dst[j] = row[j] - lse;
}

void require_matrix(std::string_view op, const Shape& s) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected [N, K], got " + to_string(s));
}

}  // namespace

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  require_defined("log_softmax", logits.defined());
  require_matrix("log_softmax", logits.shape());
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) row_log_softmax(logits.values().data() + n * K, K, out.data() + n * K);
  NodePtr<T> nx = logits.node();
  return detail::make_result<T>("log_softmax", logits.shape(), std::move(out), {nx},
                                [nx, N, K](detail::Node<T>& o) {
                                  auto gx = nx->grad_buffer();
                                  for (std::size_t n = 0; n < N; ++n) {
                                    T gs = 0;
                                    for (std::size_t j = 0; j < K; ++j) gs += o.grad[n * K + j];
                                    for (std::size_t j = 0; j < K; ++j) {
                                      gx[n * K + j] += o.grad[n * K + j] - std::exp(o.values[n * K + j]) * gs;
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_defined("softmax", logits.defined());
  require_matrix("softmax", logits.shape());
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    row_log_softmax(logits.values().data() + n * K, K, out.data() + n * K);
    for (std::size_t j = 0; j < K; ++j) out[n * K + j] = std::exp(out[n * K + j]);
  }
  NodePtr<T> nx = logits.node();
  return detail::make_result<T>("softmax", logits.shape(), std::move(out), {nx},
                                [nx, N, K](detail::Node<T>& o) {
                                  auto gx = nx->grad_buffer();
                                  for (std::size_t n = 0; n < N; ++n) {
                                    T dot = 0;
                                    for (std::size_t j = 0; j < K; ++j) {
                                      dot += o.grad[n * K + j] * o.values[n * K + j];
                                    }
                                    for (std::size_t j = 0; j < K; ++j) {
                                      gx[n * K + j] += o.values[n * K + j] * (o.grad[n * K + j] - dot);
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_defined("cross_entropy", logits.defined());
  require_matrix("cross_entropy", logits.shape());
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  }
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= K) {
      throw DomainError("cross_entropy: label " + std::to_string(labels[n]) + " at row " +
                        std::to_string(n) + " outside [0, " + std::to_string(K) + ")");
    }
  }
  std::vector<T> logp(N * K);
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    row_log_softmax(logits.values().data() + n * K, K, logp.data() + n * K);
    total -= logp[n * K + static_cast<std::size_t>(labels[n])];
  }
  const T loss = static_cast<T>(total / static_cast<double>(N));
  NodePtr<T> nx = logits.node();
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result<T>("cross_entropy", {1}, {loss}, {nx},
                                [nx, N, K, logp = std::move(logp), lab = std::move(lab)](detail::Node<T>& o) {
                                  auto gx = nx->grad_buffer();
                                  const T g = o.grad[0] / static_cast<T>(N);
                                  for (std::size_t n = 0; n < N; ++n) {
                                    for (std::size_t j = 0; j < K; ++j) {
                                      const T target = static_cast<std::size_t>(lab[n]) == j ? T(1) : T(0);
                                      gx[n * K + j] += g * (std::exp(logp[n * K + j]) - target);
                                    }
                                  }
                                });
}

#define GODE_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> maximum(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> log(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> pad(const Tensor<T>&, const std::vector<std::pair<std::size_t, std::size_t>>&); \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);               \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                           \
  template Tensor<T> reduce_sum(const Tensor<T>&);                                                 \
  template Tensor<T> reduce_sum(const Tensor<T>&, std::size_t);                                    \
  template Tensor<T> reduce_mean(const Tensor<T>&);                                                \
  template Tensor<T> reduce_mean(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> lincomb(const Tensor<T>&, const std::vector<Tensor<T>>&, std::span<const double>); \
  template Tensor<T> weighted_sum(const std::vector<Tensor<T>>&, std::span<const double>);         \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);  \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, \
                                double);                                                           \
  template Tensor<T> avgpool_global(const Tensor<T>&);                                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> softmax(const Tensor<T>&);                                                    \
  template Tensor<T> log_softmax(const Tensor<T>&);                                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

GODE_INSTANTIATE_OPS(float)
GODE_INSTANTIATE_OPS(double)

}  // namespace gode
