#include "spine3d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace spine3d {

namespace {

std::size_t numel_of(const std::vector<int>& dims) {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
}

std::string dims_str(const std::vector<int>& dims) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << ")";
    return os.str();
}

using DataPtr = std::shared_ptr<const std::vector<Real>>;

/// Resolves the tape (if any) shared by the inputs of an op.
struct OpContext {
    Tape* tape = nullptr;
    std::vector<int> parents;

    void add(const Tensor& t) {
        if (t.on_tape()) {
            check(tape == nullptr || tape == t.tape(), "op inputs recorded on different tapes");
            tape = t.tape();
            parents.push_back(t.node());
        } else {
            parents.push_back(-1);
        }
    }

    Tensor finish(Tensor out, Tape::BackFn back) {
        if (!tape) return out;
        int node = tape->record(parents, out.size(), std::move(back));
        return tape->adopt(std::move(out), node);
    }
};

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::vector<int> dims)
    : dims_(std::move(dims)),
      data_(std::make_shared<std::vector<Real>>(numel_of(dims_), Real(0))) {
    check(!dims_.empty(), "tensor must have at least one dimension");
    for (int d : dims_) check(d > 0, "tensor dims must be positive, got " + dims_str(dims_));
}

Tensor::Tensor(std::vector<int> dims, std::vector<Real> values) : dims_(std::move(dims)) {
    check(!dims_.empty(), "tensor must have at least one dimension");
    for (int d : dims_) check(d > 0, "tensor dims must be positive, got " + dims_str(dims_));
    check(values.size() == numel_of(dims_),
          "value count " + std::to_string(values.size()) + " does not match dims " + dims_str(dims_));
    data_ = std::make_shared<std::vector<Real>>(std::move(values));
}

Tensor Tensor::full(std::vector<int> dims, Real v) {
    std::vector<Real> vals(numel_of(dims), v);
    return Tensor(std::move(dims), std::move(vals));
}

std::size_t Tensor::size() const { return data_ ? data_->size() : 0; }

Real Tensor::value() const {
    check(size() == 1, "value() requires a scalar tensor, got " + shape_str());
    return (*data_)[0];
}

Real Tensor::at(std::initializer_list<int> idx) const {
    check(static_cast<int>(idx.size()) == rank(), "index rank mismatch for " + shape_str());
    std::size_t flat = 0;
    int i = 0;
    for (int v : idx) {
        check(v >= 0 && v < dims_[static_cast<std::size_t>(i)], "index out of range");
        flat = flat * static_cast<std::size_t>(dims_[static_cast<std::size_t>(i)]) +
               static_cast<std::size_t>(v);
        ++i;
    }
    return (*data_)[flat];
}

std::string Tensor::shape_str() const { return dims_str(dims_); }

// ---------------------------------------------------------------- Tape

Tensor Tape::adopt(Tensor value, int node) {
    value.tape_ = this;
    value.node_ = node;
    return value;
}

Tensor Tape::watch(const Tensor& t) {
    check(!t.empty(), "cannot watch an empty tensor");
    check(!t.on_tape(), "tensor is already on a tape");
    int node = record({}, t.size(), nullptr);
    Tensor out = t;
    return adopt(std::move(out), node);
}

int Tape::record(std::vector<int> parents, std::size_t out_size, BackFn back) {
    nodes_.push_back(Node{std::move(parents), out_size, std::move(back)});
    grads_.emplace_back();
    touched_.push_back(0);
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<Real>& Tape::grad_buffer(int node) {
    auto n = static_cast<std::size_t>(node);
    if (grads_[n].empty()) grads_[n].assign(nodes_[n].size, Real(0));
    touched_[n] = 1;
    return grads_[n];
}

void Tape::backward(const Tensor& loss) {
    check(loss.size() == 1, "backward requires a scalar loss, got " + loss.shape_str());
    check(loss.tape() == this && loss.node() >= 0, "loss is not recorded on this tape");
    std::fill(touched_.begin(), touched_.end(), 0);
    for (auto& g : grads_) g.clear();
    grad_buffer(loss.node())[0] = Real(1);
    for (int i = loss.node(); i >= 0; --i) {
        auto n = static_cast<std::size_t>(i);
        if (!touched_[n] || !nodes_[n].back) continue;
        nodes_[n].back(*this, {grads_[n].data(), grads_[n].size()});
    }
}

Tensor Tape::grad(const Tensor& t) const {
    check(t.tape() == this && t.node() >= 0, "tensor is not recorded on this tape");
    auto n = static_cast<std::size_t>(t.node());
    if (grads_[n].empty()) return Tensor(t.dims());
    return Tensor(t.dims(), grads_[n]);
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.dims() == b.dims(), "add shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    std::vector<Real> out(a.size());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    OpContext ctx;
    ctx.add(a);
    ctx.add(b);
    int pa = ctx.parents[0], pb = ctx.parents[1];
    return ctx.finish(Tensor(a.dims(), std::move(out)),
                      [pa, pb](Tape& t, std::span<const Real> g) {
                          if (pa >= 0) {
                              auto& ga = t.grad_buffer(pa);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (pb >= 0) {
                              auto& gb = t.grad_buffer(pb);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                          }
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.dims() == b.dims(), "sub shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    std::vector<Real> out(a.size());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    OpContext ctx;
    ctx.add(a);
    ctx.add(b);
    int pa = ctx.parents[0], pb = ctx.parents[1];
    return ctx.finish(Tensor(a.dims(), std::move(out)),
                      [pa, pb](Tape& t, std::span<const Real> g) {
                          if (pa >= 0) {
                              auto& ga = t.grad_buffer(pa);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (pb >= 0) {
                              auto& gb = t.grad_buffer(pb);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.dims() == b.dims(), "mul shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    std::vector<Real> out(a.size());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    OpContext ctx;
    ctx.add(a);
    ctx.add(b);
    int pa = ctx.parents[0], pb = ctx.parents[1];
    DataPtr ad = a.on_tape() || b.on_tape() ? std::make_shared<std::vector<Real>>(av.begin(), av.end()) : nullptr;
    DataPtr bd = ad ? std::make_shared<std::vector<Real>>(bv.begin(), bv.end()) : nullptr;
    return ctx.finish(Tensor(a.dims(), std::move(out)),
                      [pa, pb, ad, bd](Tape& t, std::span<const Real> g) {
                          if (pa >= 0) {
                              auto& ga = t.grad_buffer(pa);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
                          }
                          if (pb >= 0) {
                              auto& gb = t.grad_buffer(pb);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ad)[i];
                          }
                      });
}

Tensor add_scalar(const Tensor& a, Real s) {
    std::vector<Real> out(a.size());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
    OpContext ctx;
    ctx.add(a);
    int pa = ctx.parents[0];
    return ctx.finish(Tensor(a.dims(), std::move(out)),
                      [pa](Tape& t, std::span<const Real> g) {
                          if (pa < 0) return;
                          auto& ga = t.grad_buffer(pa);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                      });
}

Tensor mul_scalar(const Tensor& a, Real s) {
    std::vector<Real> out(a.size());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    OpContext ctx;
    ctx.add(a);
    int pa = ctx.parents[0];
    return ctx.finish(Tensor(a.dims(), std::move(out)),
                      [pa, s](Tape& t, std::span<const Real> g) {
                          if (pa < 0) return;
                          auto& ga = t.grad_buffer(pa);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                      });
}

Tensor div_scalar(const Tensor& x, const Tensor& s) {
    check(s.size() == 1, "div_scalar divisor must be a one-element tensor");
    Real sv = s.values()[0];
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / sv;
    OpContext ctx;
    ctx.add(x);
    ctx.add(s);
    int px = ctx.parents[0], ps = ctx.parents[1];
    DataPtr xd = (px >= 0 || ps >= 0) ? std::make_shared<std::vector<Real>>(xv.begin(), xv.end()) : nullptr;
    return ctx.finish(Tensor(x.dims(), std::move(out)),
                      [px, ps, sv, xd](Tape& t, std::span<const Real> g) {
                          if (px >= 0) {
                              auto& gx = t.grad_buffer(px);
                              for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / sv;
                          }
                          if (ps >= 0) {
                              Real acc = 0;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  acc -= g[i] * (*xd)[i] / (sv * sv);
                              t.grad_buffer(ps)[0] += acc;
                          }
                      });
}

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& x, std::vector<int> dims) {
    check(numel_of(dims) == x.size(),
          "reshape element count mismatch " + x.shape_str() + " -> " + dims_str(dims));
    std::vector<Real> out(x.values().begin(), x.values().end());
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    return ctx.finish(Tensor(std::move(dims), std::move(out)),
                      [px](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                      });
}

Tensor transpose(const Tensor& x) {
    check(x.rank() == 2, "transpose requires a rank-2 tensor, got " + x.shape_str());
    const int r = x.dim(0), c = x.dim(1);
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = xv[static_cast<std::size_t>(i) * c + j];
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    return ctx.finish(Tensor({c, r}, std::move(out)),
                      [px, r, c](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (int i = 0; i < r; ++i)
                              for (int j = 0; j < c; ++j)
                                  gx[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j) * r + i];
                      });
}

Tensor slice_last(const Tensor& x, int from, int to) {
    const int last = x.dim(x.rank() - 1);
    check(0 <= from && from < to && to <= last,
          "slice [" + std::to_string(from) + "," + std::to_string(to) + ") out of range for " + x.shape_str());
    const std::size_t width = static_cast<std::size_t>(to - from);
    const std::size_t lastn = static_cast<std::size_t>(last);
    const std::size_t outer = x.size() / lastn;
    std::vector<int> dims = x.dims();
    dims.back() = to - from;
    std::vector<Real> out(outer * width);
    auto xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(&out[o * width], &xv[o * lastn + static_cast<std::size_t>(from)], width * sizeof(Real));
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    return ctx.finish(Tensor(std::move(dims), std::move(out)),
                      [px, outer, width, lastn, from](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t j = 0; j < width; ++j)
                                  gx[o * lastn + static_cast<std::size_t>(from) + j] += g[o * width + j];
                      });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat of zero tensors");
    std::vector<int> dims = parts[0].dims();
    int total = 0;
    for (const auto& p : parts) {
        check(p.rank() == static_cast<int>(dims.size()), "concat rank mismatch");
        for (int i = 0; i + 1 < p.rank(); ++i)
            check(p.dim(i) == dims[static_cast<std::size_t>(i)], "concat leading-dim mismatch");
        total += p.dim(p.rank() - 1);
    }
    dims.back() = total;
    const std::size_t outer = numel_of(dims) / static_cast<std::size_t>(total);
    std::vector<Real> out(outer * static_cast<std::size_t>(total));
    std::size_t off = 0;
    OpContext ctx;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const std::size_t w = static_cast<std::size_t>(p.dim(p.rank() - 1));
        auto pv = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(&out[o * static_cast<std::size_t>(total) + off], &pv[o * w], w * sizeof(Real));
        ctx.add(p);
        widths.push_back(w);
        off += w;
    }
    auto parents = ctx.parents;
    const std::size_t totaln = static_cast<std::size_t>(total);
    return ctx.finish(Tensor(std::move(dims), std::move(out)),
                      [parents, widths, outer, totaln](Tape& t, std::span<const Real> g) {
                          std::size_t off = 0;
                          for (std::size_t pi = 0; pi < parents.size(); ++pi) {
                              const std::size_t w = widths[pi];
                              if (parents[pi] >= 0) {
                                  auto& gp = t.grad_buffer(parents[pi]);
                                  for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t j = 0; j < w; ++j)
                                          gp[o * w + j] += g[o * totaln + off + j];
                              }
                              off += w;
                          }
                      });
}

// ---------------------------------------------------------------- matmul / conv

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2, "matmul requires rank-2 tensors");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    check(k == k2, "matmul inner dims disagree: " + a.shape_str() + " x " + b.shape_str());
    std::vector<Real> out(static_cast<std::size_t>(m) * n, Real(0));
    auto av = a.values(), bv = b.values();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const Real aip = av[static_cast<std::size_t>(i) * k + p];
            const Real* brow = &bv[static_cast<std::size_t>(p) * n];
            Real* orow = &out[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    OpContext ctx;
    ctx.add(a);
    ctx.add(b);
    int pa = ctx.parents[0], pb = ctx.parents[1];
    DataPtr ad = (pb >= 0) ? std::make_shared<std::vector<Real>>(av.begin(), av.end()) : nullptr;
    DataPtr bd = (pa >= 0) ? std::make_shared<std::vector<Real>>(bv.begin(), bv.end()) : nullptr;
    return ctx.finish(
        Tensor({m, n}, std::move(out)), [pa, pb, ad, bd, m, k, n](Tape& t, std::span<const Real> g) {
            if (pa >= 0) {  // dA = G * B^T
                auto& ga = t.grad_buffer(pa);
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const Real* grow = &g[static_cast<std::size_t>(i) * n];
                        const Real* brow = &(*bd)[static_cast<std::size_t>(p) * n];
                        Real acc = 0;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<std::size_t>(i) * k + p] += acc;
                    }
            }
            if (pb >= 0) {  // dB = A^T * G
                auto& gb = t.grad_buffer(pb);
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const Real aip = (*ad)[static_cast<std::size_t>(i) * k + p];
                        const Real* grow = &g[static_cast<std::size_t>(i) * n];
                        Real* gbrow = &gb[static_cast<std::size_t>(p) * n];
                        for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
            }
        });
}

int conv_out_extent(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad, int groups) {
    check(x.rank() == 3, "conv2d input must be (h,w,c), got " + x.shape_str());
    check(w.rank() == 4, "conv2d kernel must be (kh,kw,c_in/groups,c_out), got " + w.shape_str());
    check(stride >= 1, "conv2d stride must be >= 1");
    check(pad >= 0, "conv2d pad must be >= 0");
    const int H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
    const int KH = w.dim(0), KW = w.dim(1), CinG = w.dim(2), Cout = w.dim(3);
    check(groups >= 1 && Cin % groups == 0 && Cout % groups == 0,
          "conv2d groups=" + std::to_string(groups) + " must divide c_in=" + std::to_string(Cin) +
              " and c_out=" + std::to_string(Cout));
    check(CinG == Cin / groups, "conv2d kernel input channels " + std::to_string(CinG) +
                                    " != c_in/groups = " + std::to_string(Cin / groups));
    const int OH = conv_out_extent(H, KH, stride, pad);
    const int OW = conv_out_extent(W, KW, stride, pad);
    check(OH >= 1 && OW >= 1, "conv2d output would be empty for input " + x.shape_str() +
                                  " kernel " + w.shape_str());
    const int CoutG = Cout / groups;

    std::vector<Real> out(static_cast<std::size_t>(OH) * OW * Cout, Real(0));
    auto xv = x.values();
    auto wv = w.values();
    for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
            Real* yrow = &out[(static_cast<std::size_t>(oy) * OW + ox) * Cout];
            for (int ky = 0; ky < KH; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < KW; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    const Real* xpix = &xv[(static_cast<std::size_t>(iy) * W + ix) * Cin];
                    const Real* wk = &wv[(static_cast<std::size_t>(ky) * KW + kx) * CinG * Cout];
                    for (int g = 0; g < groups; ++g)
                        for (int ic = 0; ic < CinG; ++ic) {
                            const Real xval = xpix[g * CinG + ic];
                            const Real* wrow = wk + static_cast<std::size_t>(ic) * Cout + g * CoutG;
                            Real* ygrp = yrow + g * CoutG;
                            for (int oc = 0; oc < CoutG; ++oc) ygrp[oc] += xval * wrow[oc];
                        }
                }
            }
        }

    OpContext ctx;
    ctx.add(x);
    ctx.add(w);
    int px = ctx.parents[0], pw = ctx.parents[1];
    DataPtr xd = (pw >= 0) ? std::make_shared<std::vector<Real>>(xv.begin(), xv.end()) : nullptr;
    DataPtr wd = (px >= 0) ? std::make_shared<std::vector<Real>>(wv.begin(), wv.end()) : nullptr;
    return ctx.finish(
        Tensor({OH, OW, Cout}, std::move(out)),
        [px, pw, xd, wd, H, W, Cin, KH, KW, CinG, Cout, CoutG, OH, OW, stride, pad,
         groups](Tape& t, std::span<const Real> g) {
            std::vector<Real>* gx = px >= 0 ? &t.grad_buffer(px) : nullptr;
            std::vector<Real>* gw = pw >= 0 ? &t.grad_buffer(pw) : nullptr;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    const Real* grow = &g[(static_cast<std::size_t>(oy) * OW + ox) * Cout];
                    for (int ky = 0; ky < KH; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < KW; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            const std::size_t xbase = (static_cast<std::size_t>(iy) * W + ix) * Cin;
                            const std::size_t wbase =
                                (static_cast<std::size_t>(ky) * KW + kx) * CinG * Cout;
                            for (int grp = 0; grp < groups; ++grp)
                                for (int ic = 0; ic < CinG; ++ic) {
                                    const std::size_t xi = xbase + grp * CinG + ic;
                                    const std::size_t wrow =
                                        wbase + static_cast<std::size_t>(ic) * Cout + grp * CoutG;
                                    const Real* ggrp = grow + grp * CoutG;
                                    if (gx) {
                                        const Real* wr = &(*wd)[wrow];
                                        Real acc = 0;
                                        for (int oc = 0; oc < CoutG; ++oc) acc += wr[oc] * ggrp[oc];
                                        (*gx)[xi] += acc;
                                    }
                                    if (gw) {
                                        const Real xval = (*xd)[xi];
                                        Real* gwr = &(*gw)[wrow];
                                        for (int oc = 0; oc < CoutG; ++oc) gwr[oc] += xval * ggrp[oc];
                                    }
                                }
                        }
                    }
                }
        });
}

// ---------------------------------------------------------------- pixel shuffle

Tensor pixel_unshuffle(const Tensor& x, int r) {
    check(x.rank() == 3, "pixel_unshuffle input must be (h,w,c)");
    check(r >= 1, "pixel_unshuffle factor must be >= 1");
    const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
    check(H % r == 0 && W % r == 0,
          "pixel_unshuffle r=" + std::to_string(r) + " must divide h,w of " + x.shape_str());
    const int OH = H / r, OW = W / r, OC = C * r * r;
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox)
            for (int ci = 0; ci < C; ++ci)
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) {
                        const int oc = ci * r * r + dy * r + dx;
                        out[(static_cast<std::size_t>(oy) * OW + ox) * OC + oc] =
                            xv[(static_cast<std::size_t>(oy * r + dy) * W + (ox * r + dx)) * C + ci];
                    }
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    return ctx.finish(Tensor({OH, OW, OC}, std::move(out)),
                      [px, OH, OW, OC, W, C, r](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (int oy = 0; oy < OH; ++oy)
                              for (int ox = 0; ox < OW; ++ox)
                                  for (int ci = 0; ci < C; ++ci)
                                      for (int dy = 0; dy < r; ++dy)
                                          for (int dx = 0; dx < r; ++dx) {
                                              const int oc = ci * r * r + dy * r + dx;
                                              gx[(static_cast<std::size_t>(oy * r + dy) * W +
                                                  (ox * r + dx)) * C + ci] +=
                                                  g[(static_cast<std::size_t>(oy) * OW + ox) * OC + oc];
                                          }
                      });
}

Tensor pixel_shuffle(const Tensor& x, int r) {
    check(x.rank() == 3, "pixel_shuffle input must be (h,w,c)");
    check(r >= 1, "pixel_shuffle factor must be >= 1");
    const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
    check(C % (r * r) == 0,
          "pixel_shuffle r=" + std::to_string(r) + " requires r^2 | c for " + x.shape_str());
    const int OC = C / (r * r), OH = H * r, OW = W * r;
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (int iy = 0; iy < H; ++iy)
        for (int ix = 0; ix < W; ++ix)
            for (int co = 0; co < OC; ++co)
                for (int dy = 0; dy < r; ++dy)
                    for (int dx = 0; dx < r; ++dx) {
                        const int ci = co * r * r + dy * r + dx;
                        out[(static_cast<std::size_t>(iy * r + dy) * OW + (ix * r + dx)) * OC + co] =
                            xv[(static_cast<std::size_t>(iy) * W + ix) * C + ci];
                    }
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    return ctx.finish(Tensor({OH, OW, OC}, std::move(out)),
                      [px, H, W, C, OC, OW, r](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (int iy = 0; iy < H; ++iy)
                              for (int ix = 0; ix < W; ++ix)
                                  for (int co = 0; co < OC; ++co)
                                      for (int dy = 0; dy < r; ++dy)
                                          for (int dx = 0; dx < r; ++dx) {
                                              const int ci = co * r * r + dy * r + dx;
                                              gx[(static_cast<std::size_t>(iy) * W + ix) * C + ci] +=
                                                  g[(static_cast<std::size_t>(iy * r + dy) * OW +
                                                     (ix * r + dx)) * OC + co];
                                          }
                      });
}

// ---------------------------------------------------------------- softmax / norms

Tensor softmax(const Tensor& x, int axis) {
    check(axis >= 0 && axis < x.rank(), "softmax axis out of range for " + x.shape_str());
    std::size_t outer = 1, inner = 1;
    const auto n = static_cast<std::size_t>(x.dim(axis));
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
    for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.dim(i));
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            Real mx = xv[base];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            Real denom = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const Real e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= denom;
        }
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    DataPtr sd = px >= 0 ? std::make_shared<std::vector<Real>>(out) : nullptr;
    return ctx.finish(Tensor(x.dims(), std::move(out)),
                      [px, sd, outer, inner, n](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t in = 0; in < inner; ++in) {
                                  const std::size_t base = o * n * inner + in;
                                  Real dot = 0;
                                  for (std::size_t j = 0; j < n; ++j)
                                      dot += g[base + j * inner] * (*sd)[base + j * inner];
                                  for (std::size_t j = 0; j < n; ++j) {
                                      const std::size_t k = base + j * inner;
                                      gx[k] += (*sd)[k] * (g[k] - dot);
                                  }
                              }
                      });
}

namespace {

/// Shared normalization backward: within each slice of `n` entries gathered by
/// `index(slice, j)`, y = gamma_of(j) * xhat + beta, statistics over the slice.
struct NormSlices {
    std::size_t slices, n;
};

}  // namespace

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
    check(x.rank() == 3, "layer_norm_channels input must be (h,w,c)");
    const int C = x.dim(2);
    check(gamma.rank() == 1 && gamma.dim(0) == C, "gamma must be length c=" + std::to_string(C));
    check(beta.rank() == 1 && beta.dim(0) == C, "beta must be length c=" + std::to_string(C));
    const std::size_t px_count = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
    const std::size_t n = static_cast<std::size_t>(C);
    std::vector<Real> out(x.size());
    std::vector<Real> xhat(x.size());
    std::vector<Real> inv_s(px_count);
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (std::size_t p = 0; p < px_count; ++p) {
        const std::size_t base = p * n;
        Real mu = 0;
        for (std::size_t c = 0; c < n; ++c) mu += xv[base + c];
        mu /= static_cast<Real>(n);
        Real var = 0;
        for (std::size_t c = 0; c < n; ++c) {
            const Real d = xv[base + c] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(n);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_s[p] = is;
        for (std::size_t c = 0; c < n; ++c) {
            const Real xh = (xv[base + c] - mu) * is;
            xhat[base + c] = xh;
            out[base + c] = gv[c] * xh + bv[c];
        }
    }
    OpContext ctx;
    ctx.add(x);
    ctx.add(gamma);
    ctx.add(beta);
    int pxn = ctx.parents[0], pg = ctx.parents[1], pb = ctx.parents[2];
    const bool need = pxn >= 0 || pg >= 0 || pb >= 0;
    DataPtr xh = need ? std::make_shared<std::vector<Real>>(std::move(xhat)) : nullptr;
    DataPtr is = need ? std::make_shared<std::vector<Real>>(std::move(inv_s)) : nullptr;
    DataPtr gd = need ? std::make_shared<std::vector<Real>>(gv.begin(), gv.end()) : nullptr;
    return ctx.finish(
        Tensor(x.dims(), std::move(out)),
        [pxn, pg, pb, xh, is, gd, px_count, n](Tape& t, std::span<const Real> g) {
            std::vector<Real>* gx = pxn >= 0 ? &t.grad_buffer(pxn) : nullptr;
            std::vector<Real>* gg = pg >= 0 ? &t.grad_buffer(pg) : nullptr;
            std::vector<Real>* gb = pb >= 0 ? &t.grad_buffer(pb) : nullptr;
            for (std::size_t p = 0; p < px_count; ++p) {
                const std::size_t base = p * n;
                if (gg)
                    for (std::size_t c = 0; c < n; ++c) (*gg)[c] += g[base + c] * (*xh)[base + c];
                if (gb)
                    for (std::size_t c = 0; c < n; ++c) (*gb)[c] += g[base + c];
                if (gx) {
                    Real mean_h = 0, mean_hx = 0;
                    for (std::size_t c = 0; c < n; ++c) {
                        const Real h = g[base + c] * (*gd)[c];
                        mean_h += h;
                        mean_hx += h * (*xh)[base + c];
                    }
                    mean_h /= static_cast<Real>(n);
                    mean_hx /= static_cast<Real>(n);
                    for (std::size_t c = 0; c < n; ++c) {
                        const Real h = g[base + c] * (*gd)[c];
                        (*gx)[base + c] += (*is)[p] * (h - mean_h - (*xh)[base + c] * mean_hx);
                    }
                }
            }
        });
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
    check(x.rank() == 3, "instance_norm input must be (h,w,c)");
    const int C = x.dim(2);
    check(gamma.rank() == 1 && gamma.dim(0) == C, "gamma must be length c=" + std::to_string(C));
    check(beta.rank() == 1 && beta.dim(0) == C, "beta must be length c=" + std::to_string(C));
    const std::size_t npx = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
    const std::size_t cs = static_cast<std::size_t>(C);
    std::vector<Real> out(x.size());
    std::vector<Real> xhat(x.size());
    std::vector<Real> inv_s(cs);
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (std::size_t c = 0; c < cs; ++c) {
        Real mu = 0;
        for (std::size_t p = 0; p < npx; ++p) mu += xv[p * cs + c];
        mu /= static_cast<Real>(npx);
        Real var = 0;
        for (std::size_t p = 0; p < npx; ++p) {
            const Real d = xv[p * cs + c] - mu;
            var += d * d;
        }
        var /= static_cast<Real>(npx);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_s[c] = is;
        for (std::size_t p = 0; p < npx; ++p) {
            const Real xh = (xv[p * cs + c] - mu) * is;
            xhat[p * cs + c] = xh;
            out[p * cs + c] = gv[c] * xh + bv[c];
        }
    }
    OpContext ctx;
    ctx.add(x);
    ctx.add(gamma);
    ctx.add(beta);
    int pxn = ctx.parents[0], pg = ctx.parents[1], pb = ctx.parents[2];
    const bool need = pxn >= 0 || pg >= 0 || pb >= 0;
    DataPtr xh = need ? std::make_shared<std::vector<Real>>(std::move(xhat)) : nullptr;
    DataPtr is = need ? std::make_shared<std::vector<Real>>(std::move(inv_s)) : nullptr;
    DataPtr gd = need ? std::make_shared<std::vector<Real>>(gv.begin(), gv.end()) : nullptr;
    return ctx.finish(
        Tensor(x.dims(), std::move(out)),
        [pxn, pg, pb, xh, is, gd, npx, cs](Tape& t, std::span<const Real> g) {
            std::vector<Real>* gx = pxn >= 0 ? &t.grad_buffer(pxn) : nullptr;
            std::vector<Real>* gg = pg >= 0 ? &t.grad_buffer(pg) : nullptr;
            std::vector<Real>* gb = pb >= 0 ? &t.grad_buffer(pb) : nullptr;
            for (std::size_t c = 0; c < cs; ++c) {
                Real sum_g = 0, sum_gx = 0;
                for (std::size_t p = 0; p < npx; ++p) {
                    sum_g += g[p * cs + c];
                    sum_gx += g[p * cs + c] * (*xh)[p * cs + c];
                }
                if (gg) (*gg)[c] += sum_gx;
                if (gb) (*gb)[c] += sum_g;
                if (gx) {
                    const Real mean_h = (*gd)[c] * sum_g / static_cast<Real>(npx);
                    const Real mean_hx = (*gd)[c] * sum_gx / static_cast<Real>(npx);
                    for (std::size_t p = 0; p < npx; ++p) {
                        const Real h = g[p * cs + c] * (*gd)[c];
                        (*gx)[p * cs + c] +=
                            (*is)[c] * (h - mean_h - (*xh)[p * cs + c] * mean_hx);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------- activations

Tensor gelu(const Tensor& x) {
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real z = xv[i];
        out[i] = Real(0.5) * z * (Real(1) + std::erf(z * Real(M_SQRT1_2)));
    }
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    DataPtr xd = px >= 0 ? std::make_shared<std::vector<Real>>(xv.begin(), xv.end()) : nullptr;
    return ctx.finish(Tensor(x.dims(), std::move(out)),
                      [px, xd](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          constexpr Real inv_sqrt_2pi = Real(0.3989422804014327);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                              const Real z = (*xd)[i];
                              const Real cdf = Real(0.5) * (Real(1) + std::erf(z * Real(M_SQRT1_2)));
                              const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * z * z);
                              gx[i] += g[i] * (cdf + z * pdf);
                          }
                      });
}

Tensor leaky_relu(const Tensor& x, Real slope) {
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0 ? xv[i] : slope * xv[i];
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    DataPtr xd = px >= 0 ? std::make_shared<std::vector<Real>>(xv.begin(), xv.end()) : nullptr;
    return ctx.finish(Tensor(x.dims(), std::move(out)),
                      [px, xd, slope](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (std::size_t i = 0; i < g.size(); ++i)
                              gx[i] += g[i] * ((*xd)[i] > 0 ? Real(1) : slope);
                      });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<Real> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real z = xv[i];
        if (z >= 0) {
            out[i] = Real(1) / (Real(1) + std::exp(-z));
        } else {
            const Real e = std::exp(z);
            out[i] = e / (Real(1) + e);
        }
    }
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    DataPtr sd = px >= 0 ? std::make_shared<std::vector<Real>>(out) : nullptr;
    return ctx.finish(Tensor(x.dims(), std::move(out)),
                      [px, sd](Tape& t, std::span<const Real> g) {
                          if (px < 0) return;
                          auto& gx = t.grad_buffer(px);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                              const Real s = (*sd)[i];
                              gx[i] += g[i] * s * (Real(1) - s);
                          }
                      });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
    Real acc = 0;
    for (Real v : x.values()) acc += v;
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    const std::size_t n = x.size();
    return ctx.finish(Tensor::scalar(acc), [px, n](Tape& t, std::span<const Real> g) {
        if (px < 0) return;
        auto& gx = t.grad_buffer(px);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
}

Tensor mean(const Tensor& x) {
    Real acc = 0;
    for (Real v : x.values()) acc += v;
    const std::size_t n = x.size();
    acc /= static_cast<Real>(n);
    OpContext ctx;
    ctx.add(x);
    int px = ctx.parents[0];
    return ctx.finish(Tensor::scalar(acc), [px, n](Tape& t, std::span<const Real> g) {
        if (px < 0) return;
        auto& gx = t.grad_buffer(px);
        const Real s = g[0] / static_cast<Real>(n);
        for (std::size_t i = 0; i < n; ++i) gx[i] += s;
    });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    check(a.dims() == b.dims(), "mse shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    auto av = a.values(), bv = b.values();
    const std::size_t n = a.size();
    Real acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real d = av[i] - bv[i];
        acc += d * d;
    }
    acc /= static_cast<Real>(n);
    OpContext ctx;
    ctx.add(a);
    ctx.add(b);
    int pa = ctx.parents[0], pb = ctx.parents[1];
    const bool need = pa >= 0 || pb >= 0;
    DataPtr ad = need ? std::make_shared<std::vector<Real>>(av.begin(), av.end()) : nullptr;
    DataPtr bd = need ? std::make_shared<std::vector<Real>>(bv.begin(), bv.end()) : nullptr;
    return ctx.finish(Tensor::scalar(acc), [pa, pb, ad, bd, n](Tape& t, std::span<const Real> g) {
        const Real s = Real(2) * g[0] / static_cast<Real>(n);
        if (pa >= 0) {
            auto& ga = t.grad_buffer(pa);
            for (std::size_t i = 0; i < n; ++i) ga[i] += s * ((*ad)[i] - (*bd)[i]);
        }
        if (pb >= 0) {
            auto& gb = t.grad_buffer(pb);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= s * ((*ad)[i] - (*bd)[i]);
        }
    });
}

namespace {
constexpr Real kBceClamp = Real(1e-7);
}

Tensor bce_sum(const Tensor& k, const Tensor& y) {
    check(k.dims() == y.dims(), "bce shape mismatch " + k.shape_str() + " vs " + y.shape_str());
    auto kv = k.values(), yv = y.values();
    const std::size_t n = k.size();
    Real acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Real kc = std::min(std::max(kv[i], kBceClamp), Real(1) - kBceClamp);
        acc -= yv[i] * std::log(kc) + (Real(1) - yv[i]) * std::log(Real(1) - kc);
    }
    OpContext ctx;
    ctx.add(k);
    ctx.add(y);
    int pk = ctx.parents[0];
    const bool need = pk >= 0;
    DataPtr kd = need ? std::make_shared<std::vector<Real>>(kv.begin(), kv.end()) : nullptr;
    DataPtr yd = need ? std::make_shared<std::vector<Real>>(yv.begin(), yv.end()) : nullptr;
    return ctx.finish(Tensor::scalar(acc), [pk, kd, yd, n](Tape& t, std::span<const Real> g) {
        if (pk < 0) return;
        auto& gk = t.grad_buffer(pk);
        for (std::size_t i = 0; i < n; ++i) {
            const Real kraw = (*kd)[i];
            if (kraw < kBceClamp || kraw > Real(1) - kBceClamp) continue;  // clamped: flat
            gk[i] += g[0] * (-(*yd)[i] / kraw + (Real(1) - (*yd)[i]) / (Real(1) - kraw));
        }
    });
}

Tensor bce_mean(const Tensor& k, const Tensor& y) {
    return mul_scalar(bce_sum(k, y), Real(1) / static_cast<Real>(k.size()));
}

// ---------------------------------------------------------------- grad check

GradReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      const std::vector<Tensor>& params, double h, double tol) {
    GradReport report;
    report.step = h;

    Tape tape;
    std::vector<Tensor> watched;
    watched.reserve(params.size());
    for (const auto& p : params) watched.push_back(tape.watch(p));
    Tensor loss = f(watched);
    check(loss.size() == 1, "grad_check function must return a scalar");
    tape.backward(loss);
    std::vector<std::vector<Real>> analytic;
    for (const auto& w : watched) {
        Tensor g = tape.grad(w);
        analytic.emplace_back(g.values().begin(), g.values().end());
    }

    std::vector<Tensor> probe = params;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<Real> base(params[pi].values().begin(), params[pi].values().end());
        std::vector<double> numeric(base.size());
        for (std::size_t j = 0; j < base.size(); ++j) {
            std::vector<Real> plus = base, minus = base;
            plus[j] += static_cast<Real>(h);
            minus[j] -= static_cast<Real>(h);
            probe[pi] = Tensor(params[pi].dims(), std::move(plus));
            const double fp = static_cast<double>(f(probe).value());
            probe[pi] = Tensor(params[pi].dims(), std::move(minus));
            const double fm = static_cast<double>(f(probe).value());
            probe[pi] = params[pi];
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        // Relative error is anchored to the parameter's largest gradient
        // magnitude: per-coordinate ratios explode on near-zero entries where
        // the finite-difference oracle itself carries truncation noise.
        double scale = 1e-6;
        for (std::size_t j = 0; j < base.size(); ++j) {
            scale = std::max(scale, std::abs(static_cast<double>(analytic[pi][j])));
            scale = std::max(scale, std::abs(numeric[j]));
        }
        for (std::size_t j = 0; j < base.size(); ++j) {
            const double abs_err = std::abs(static_cast<double>(analytic[pi][j]) - numeric[j]);
            const double rel_err = abs_err / scale;
            if (abs_err > report.max_abs_err) report.max_abs_err = abs_err;
            if (rel_err > report.max_rel_err) {
                report.max_rel_err = rel_err;
                report.worst = "param " + std::to_string(pi) + " [" + std::to_string(j) + "]";
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    return report;
}

}  // namespace spine3d
