#include "cbdiff/tape.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>

namespace cbdiff {

namespace {

void gemm(bool ta, bool tb, int m, int n, int k, const float* a, int lda, const float* b, int ldb,
          float* c, int ldc, float alpha = 1.0f, float beta = 0.0f) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}
void gemm(bool ta, bool tb, int m, int n, int k, const double* a, int lda, const double* b, int ldb,
          double* c, int ldc, double alpha = 1.0, double beta = 0.0) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

[[noreturn]] void fail(const char* op, const std::string& what) {
    throw std::runtime_error(std::string(op) + ": " + what);
}

void require(bool cond, const char* op, const std::string& what) {
    if (!cond) fail(op, what);
}

struct ConvGeom {
    int B, H, W, Ci, kh, kw, Co, stride, OH, OW, pad_top, pad_left;
};

ConvGeom conv_geom(const Shape& xs, const Shape& ws, int stride) {
    require(xs.size() == 4, "conv2d", "input must be (B,H,W,C), got " + shape_str(xs));
    require(ws.size() == 4, "conv2d", "weight must be (kh,kw,Ci,Co), got " + shape_str(ws));
    require(stride == 1 || stride == 2, "conv2d", "stride must be 1 or 2");
    ConvGeom g;
    g.B = xs[0]; g.H = xs[1]; g.W = xs[2]; g.Ci = xs[3];
    g.kh = ws[0]; g.kw = ws[1]; g.Co = ws[3];
    require(ws[2] == g.Ci, "conv2d",
            "input channels " + std::to_string(g.Ci) + " vs weight " + shape_str(ws));
    g.stride = stride;
    g.OH = (g.H + stride - 1) / stride;
    g.OW = (g.W + stride - 1) / stride;
    int pad_h = std::max((g.OH - 1) * stride + g.kh - g.H, 0);
    int pad_w = std::max((g.OW - 1) * stride + g.kw - g.W, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
    return g;
}

// NHWC im2col: rows are output pixels, columns are (ky,kx,ci).
template <class T>
void im2col(const Tensor<T>& x, const ConvGeom& g, std::vector<T>& col) {
    const int64_t rows = int64_t(g.B) * g.OH * g.OW;
    const int K = g.kh * g.kw * g.Ci;
    col.assign(size_t(rows) * K, T(0));
    const T* xp = x.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const int b = int(r / (g.OH * g.OW));
        const int oy = int((r / g.OW) % g.OH);
        const int ox = int(r % g.OW);
        T* dst = col.data() + size_t(r) * K;
        for (int ky = 0; ky < g.kh; ++ky) {
            const int y = oy * g.stride - g.pad_top + ky;
            if (y < 0 || y >= g.H) { dst += g.kw * g.Ci; continue; }
            for (int kx = 0; kx < g.kw; ++kx) {
                const int xcol = ox * g.stride - g.pad_left + kx;
                if (xcol >= 0 && xcol < g.W) {
                    const T* src = xp + ((int64_t(b) * g.H + y) * g.W + xcol) * g.Ci;
                    std::memcpy(dst, src, sizeof(T) * size_t(g.Ci));
                }
                dst += g.Ci;
            }
        }
    }
}

}  // namespace

template <class T>
int Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
    ensure_finite(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

template <class T>
void Tape<T>::backward(int root) {
    if (value(root).size() != 1) fail("backward", "root must be scalar, got " + shape_str(value(root).shape()));
    for (int i = 0; i <= root; ++i) {
        Node& n = nodes_[size_t(i)];
        if (n.requires_grad || i == root) n.grad = Tensor<T>(n.value.shape());
    }
    nodes_[size_t(root)].grad[0] = T(1);
    for (int i = root; i >= 0; --i) {
        Node& n = nodes_[size_t(i)];
        if (n.requires_grad && n.backward) n.backward(*this);
    }
}

namespace {

template <class T>
int emit(Tape<T>& t, Tensor<T> value, bool req, const char* op,
         std::function<void(Tape<T>&, int)> bwd) {
    ensure_finite(value, op);
    typename Tape<T>::Node n;
    n.value = std::move(value);
    n.requires_grad = req;
    n.op = op;
    int id = t.push(std::move(n));
    if (req && bwd) {
        // re-wrap so the closure knows its own node id
        t.set_backward(id, std::move(bwd));
    }
    return id;
}

}  // namespace

// set_backward lives here to keep the header free of lambda plumbing
template <class T>
void Tape<T>::set_backward(int id, std::function<void(Tape&, int)> fn) {
    nodes_[size_t(id)].backward = [id, fn = std::move(fn)](Tape& t) { fn(t, id); };
}

// ---------------------------------------------------------------- elementwise

namespace {

template <class T, class FwdOp, class DaOp, class DbOp>
int binary_same_shape(Tape<T>& t, int a, int b, const char* op, FwdOp f, DaOp da_of, DbOp db_of) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    check_shapes_match(av.shape(), bv.shape(), op);
    Tensor<T> out(av.shape());
    const int64_t n = out.size();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    bool req = t.wants_grad(a) || t.wants_grad(b);
    return emit<T>(t, std::move(out), req, op, [a, b, da_of, db_of](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        const auto& x = tt.value(a);
        const auto& y = tt.value(b);
        const int64_t m = dy.size();
        if (auto* ga = tt.grad_if(a)) {
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < m; ++i) (*ga)[i] += da_of(dy[i], x[i], y[i]);
        }
        if (auto* gb = tt.grad_if(b)) {
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < m; ++i) (*gb)[i] += db_of(dy[i], x[i], y[i]);
        }
    });
}

template <class T, class FwdOp, class DxOp>
int unary_elem(Tape<T>& t, int a, const char* op, FwdOp f, DxOp dx_of) {
    const auto& av = t.value(a);
    Tensor<T> out(av.shape());
    const int64_t n = out.size();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = f(av[i]);
    return emit<T>(t, std::move(out), t.wants_grad(a), op, [a, dx_of](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        const auto& x = tt.value(a);
        const auto& y = tt.value(id);
        auto* gx = tt.grad_if(a);
        if (!gx) return;
        const int64_t m = dy.size();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < m; ++i) (*gx)[i] += dx_of(dy[i], x[i], y[i]);
    });
}

}  // namespace

template <class T>
int add(Tape<T>& t, int a, int b) {
    return binary_same_shape<T>(t, a, b, "add", [](T x, T y) { return x + y; },
                                [](T d, T, T) { return d; }, [](T d, T, T) { return d; });
}

template <class T>
int sub(Tape<T>& t, int a, int b) {
    return binary_same_shape<T>(t, a, b, "sub", [](T x, T y) { return x - y; },
                                [](T d, T, T) { return d; }, [](T d, T, T) { return -d; });
}

template <class T>
int mul(Tape<T>& t, int a, int b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    // broadcast path: rhs shape equals lhs except last dim == 1
    bool bcast = av.shape() != bv.shape();
    if (bcast) {
        Shape want = av.shape();
        want.back() = 1;
        if (bv.shape() != want)
            fail("mul", "shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
        const int C = av.shape().back();
        const int64_t outer = av.size() / C;
        Tensor<T> out(av.shape());
#pragma omp parallel for schedule(static)
        for (int64_t o = 0; o < outer; ++o)
            for (int c = 0; c < C; ++c) out[o * C + c] = av[o * C + c] * bv[o];
        bool req = t.wants_grad(a) || t.wants_grad(b);
        return emit<T>(t, std::move(out), req, "mul", [a, b, C, outer](Tape<T>& tt, int id) {
            const auto& dy = tt.grad(id);
            const auto& x = tt.value(a);
            const auto& s = tt.value(b);
            if (auto* ga = tt.grad_if(a)) {
#pragma omp parallel for schedule(static)
                for (int64_t o = 0; o < outer; ++o)
                    for (int c = 0; c < C; ++c) (*ga)[o * C + c] += dy[o * C + c] * s[o];
            }
            if (auto* gb = tt.grad_if(b)) {
#pragma omp parallel for schedule(static)
                for (int64_t o = 0; o < outer; ++o) {
                    T acc = 0;
                    for (int c = 0; c < C; ++c) acc += dy[o * C + c] * x[o * C + c];
                    (*gb)[o] += acc;
                }
            }
        });
    }
    return binary_same_shape<T>(t, a, b, "mul", [](T x, T y) { return x * y; },
                                [](T d, T, T y) { return d * y; }, [](T d, T x, T) { return d * x; });
}

template <class T>
int div_(Tape<T>& t, int a, int b) {
    return binary_same_shape<T>(t, a, b, "div", [](T x, T y) { return x / y; },
                                [](T d, T, T y) { return d / y; },
                                [](T d, T x, T y) { return -d * x / (y * y); });
}

template <class T>
int add_const(Tape<T>& t, int a, T c) {
    return unary_elem<T>(t, a, "add_const", [c](T x) { return x + c; },
                         [](T d, T, T) { return d; });
}

template <class T>
int scale_const(Tape<T>& t, int a, T c) {
    return unary_elem<T>(t, a, "scale_const", [c](T x) { return x * c; },
                         [c](T d, T, T) { return d * c; });
}

template <class T>
int exp_(Tape<T>& t, int a) {
    return unary_elem<T>(t, a, "exp", [](T x) { return std::exp(x); },
                         [](T d, T, T y) { return d * y; });
}

template <class T>
int log_(Tape<T>& t, int a) {
    return unary_elem<T>(t, a, "log", [](T x) { return std::log(x); },
                         [](T d, T x, T) { return d / x; });
}

template <class T>
int sigmoid_(Tape<T>& t, int a) {
    return unary_elem<T>(t, a, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                         [](T d, T, T y) { return d * y * (T(1) - y); });
}

template <class T>
int silu_(Tape<T>& t, int a) {
    return unary_elem<T>(
        t, a, "silu",
        [](T x) { return x / (T(1) + std::exp(-x)); },
        [](T d, T x, T) {
            T s = T(1) / (T(1) + std::exp(-x));
            return d * s * (T(1) + x * (T(1) - s));
        });
}

template <class T>
int clamp_min(Tape<T>& t, int a, T floor) {
    return unary_elem<T>(t, a, "clamp_min", [floor](T x) { return x > floor ? x : floor; },
                         [floor](T d, T x, T) { return x > floor ? d : T(0); });
}

// ------------------------------------------------------------- linear algebra

template <class T>
int matmul(Tape<T>& t, int a, int b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    require(av.rank() == 2 && bv.rank() == 2, "matmul",
            "expects rank-2 operands, got " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    require(bv.dim(0) == k, "matmul",
            "inner dims differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    Tensor<T> out({m, n});
    gemm(false, false, m, n, k, av.data(), k, bv.data(), n, out.data(), n);
    bool req = t.wants_grad(a) || t.wants_grad(b);
    return emit<T>(t, std::move(out), req, "matmul", [a, b, m, n, k](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        if (auto* ga = tt.grad_if(a))  // dA += dY B^T
            gemm(false, true, m, k, n, dy.data(), n, tt.value(b).data(), n, ga->data(), k, T(1), T(1));
        if (auto* gb = tt.grad_if(b))  // dB += A^T dY
            gemm(true, false, k, n, m, tt.value(a).data(), k, dy.data(), n, gb->data(), n, T(1), T(1));
    });
}

template <class T>
int matmul_nt(Tape<T>& t, int a, int b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    require(av.rank() == 2 && bv.rank() == 2, "matmul_nt", "expects rank-2 operands");
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    require(bv.dim(1) == k, "matmul_nt",
            "inner dims differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
    Tensor<T> out({m, n});
    gemm(false, true, m, n, k, av.data(), k, bv.data(), k, out.data(), n);
    bool req = t.wants_grad(a) || t.wants_grad(b);
    return emit<T>(t, std::move(out), req, "matmul_nt", [a, b, m, n, k](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        if (auto* ga = tt.grad_if(a))  // dA += dY B
            gemm(false, false, m, k, n, dy.data(), n, tt.value(b).data(), k, ga->data(), k, T(1), T(1));
        if (auto* gb = tt.grad_if(b))  // dB += dY^T A
            gemm(true, false, n, k, m, dy.data(), n, tt.value(a).data(), k, gb->data(), k, T(1), T(1));
    });
}

template <class T>
int add_rowvec(Tape<T>& t, int x, int v) {
    const auto& xv = t.value(x);
    const auto& vv = t.value(v);
    require(xv.rank() == 2 && vv.rank() == 1 && vv.dim(0) == xv.dim(1), "add_rowvec",
            "expects (m,n)+(n,), got " + shape_str(xv.shape()) + " + " + shape_str(vv.shape()));
    const int m = xv.dim(0), n = xv.dim(1);
    Tensor<T> out(xv.shape());
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] + vv[c];
    bool req = t.wants_grad(x) || t.wants_grad(v);
    return emit<T>(t, std::move(out), req, "add_rowvec", [x, v, m, n](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        if (auto* gx = tt.grad_if(x)) {
            const int64_t sz = dy.size();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < sz; ++i) (*gx)[i] += dy[i];
        }
        if (auto* gv = tt.grad_if(v)) {
#pragma omp parallel for schedule(static)
            for (int c = 0; c < n; ++c) {
                T acc = 0;
                for (int r = 0; r < m; ++r) acc += dy[int64_t(r) * n + c];
                (*gv)[c] += acc;
            }
        }
    });
}

// ------------------------------------------------------------------ structured

template <class T>
int conv2d(Tape<T>& t, int x, int w, int bias, int stride) {
    const auto& xv = t.value(x);
    const auto& wv = t.value(w);
    const auto& bv = t.value(bias);
    ConvGeom g = conv_geom(xv.shape(), wv.shape(), stride);
    require(bv.rank() == 1 && bv.dim(0) == g.Co, "conv2d",
            "bias must be (Co,), got " + shape_str(bv.shape()));
    const int64_t rows = int64_t(g.B) * g.OH * g.OW;
    const int K = g.kh * g.kw * g.Ci;
    std::vector<T> col;
    im2col(xv, g, col);
    Tensor<T> out({g.B, g.OH, g.OW, g.Co});
    gemm(false, false, int(rows), g.Co, K, col.data(), K, wv.data(), g.Co, out.data(), g.Co);
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < g.Co; ++c) out[r * g.Co + c] += bv[c];
    bool req = t.wants_grad(x) || t.wants_grad(w) || t.wants_grad(bias);
    return emit<T>(t, std::move(out), req, "conv2d", [x, w, bias, g, rows, K](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        if (auto* gb = tt.grad_if(bias)) {
#pragma omp parallel for schedule(static)
            for (int c = 0; c < g.Co; ++c) {
                T acc = 0;
                for (int64_t r = 0; r < rows; ++r) acc += dy[r * g.Co + c];
                (*gb)[c] += acc;
            }
        }
        if (auto* gw = tt.grad_if(w)) {  // dW += col^T dY
            std::vector<T> col;
            im2col(tt.value(x), g, col);
            gemm(true, false, K, g.Co, int(rows), col.data(), K, dy.data(), g.Co, gw->data(), g.Co,
                 T(1), T(1));
        }
        if (auto* gx = tt.grad_if(x)) {  // dX = col2im(dY W^T), gathered per input pixel
            std::vector<T> dcol(size_t(rows) * K);
            gemm(false, true, int(rows), K, g.Co, dy.data(), g.Co, tt.value(w).data(), g.Co,
                 dcol.data(), K);
            const int64_t npix = int64_t(g.B) * g.H * g.W;
#pragma omp parallel for schedule(static)
            for (int64_t p = 0; p < npix; ++p) {
                const int b = int(p / (g.H * g.W));
                const int y = int((p / g.W) % g.H);
                const int xc = int(p % g.W);
                T* dst = gx->data() + p * g.Ci;
                for (int ky = 0; ky < g.kh; ++ky) {
                    const int ynum = y + g.pad_top - ky;
                    if (ynum < 0 || ynum % g.stride) continue;
                    const int oy = ynum / g.stride;
                    if (oy >= g.OH) continue;
                    for (int kx = 0; kx < g.kw; ++kx) {
                        const int xnum = xc + g.pad_left - kx;
                        if (xnum < 0 || xnum % g.stride) continue;
                        const int ox = xnum / g.stride;
                        if (ox >= g.OW) continue;
                        const int64_t r = (int64_t(b) * g.OH + oy) * g.OW + ox;
                        const T* src = dcol.data() + size_t(r) * K + (size_t(ky) * g.kw + kx) * g.Ci;
                        for (int ci = 0; ci < g.Ci; ++ci) dst[ci] += src[ci];
                    }
                }
            }
        }
    });
}

template <class T>
int upsample2x(Tape<T>& t, int x) {
    const auto& xv = t.value(x);
    require(xv.rank() == 4, "upsample2x", "expects (B,H,W,C), got " + shape_str(xv.shape()));
    const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor<T> out({B, 2 * H, 2 * W, C});
    const int64_t npix = int64_t(B) * 2 * H * 2 * W;
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < npix; ++p) {
        const int b = int(p / (4 * H * W));
        const int y = int((p / (2 * W)) % (2 * H));
        const int xc = int(p % (2 * W));
        const T* src = xv.data() + ((int64_t(b) * H + y / 2) * W + xc / 2) * C;
        T* dst = out.data() + p * C;
        std::memcpy(dst, src, sizeof(T) * size_t(C));
    }
    return emit<T>(t, std::move(out), t.wants_grad(x), "upsample2x", [x, B, H, W, C](Tape<T>& tt, int id) {
        auto* gx = tt.grad_if(x);
        if (!gx) return;
        const auto& dy = tt.grad(id);
        const int64_t npix = int64_t(B) * H * W;
#pragma omp parallel for schedule(static)
        for (int64_t p = 0; p < npix; ++p) {
            const int b = int(p / (H * W));
            const int y = int((p / W) % H);
            const int xc = int(p % W);
            T* dst = gx->data() + p * C;
            for (int dy2 = 0; dy2 < 2; ++dy2)
                for (int dx2 = 0; dx2 < 2; ++dx2) {
                    const T* src =
                        dy.data() + ((int64_t(b) * 2 * H + 2 * y + dy2) * 2 * W + 2 * xc + dx2) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
        }
    });
}

template <class T>
int softmax(Tape<T>& t, int x, int axis) {
    const auto& xv = t.value(x);
    if (axis < 0) axis += xv.rank();
    require(axis >= 0 && axis < xv.rank(), "softmax", "axis out of range");
    const int n = xv.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
    Tensor<T> out(xv.shape());
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            T mx = xv[base];
            for (int i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            T z = 0;
            for (int i = 0; i < n; ++i) {
                T e = std::exp(xv[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (int i = 0; i < n; ++i) out[base + i * inner] /= z;
        }
    return emit<T>(t, std::move(out), t.wants_grad(x),
                   "softmax", [x, n, inner, outer](Tape<T>& tt, int id) {
                       auto* gx = tt.grad_if(x);
                       if (!gx) return;
                       const auto& y = tt.value(id);
                       const auto& dy = tt.grad(id);
#pragma omp parallel for schedule(static) collapse(2)
                       for (int64_t o = 0; o < outer; ++o)
                           for (int64_t in = 0; in < inner; ++in) {
                               const int64_t base = o * n * inner + in;
                               T dot = 0;
                               for (int i = 0; i < n; ++i)
                                   dot += dy[base + i * inner] * y[base + i * inner];
                               for (int i = 0; i < n; ++i)
                                   (*gx)[base + i * inner] +=
                                       y[base + i * inner] * (dy[base + i * inner] - dot);
                           }
                   });
}

template <class T>
int sum_all(Tape<T>& t, int x) {
    const auto& xv = t.value(x);
    T acc = 0;
    for (int64_t i = 0; i < xv.size(); ++i) acc += xv[i];
    return emit<T>(t, Tensor<T>({1}, {acc}), t.wants_grad(x), "sum", [x](Tape<T>& tt, int id) {
        auto* gx = tt.grad_if(x);
        if (!gx) return;
        const T d = tt.grad(id)[0];
        const int64_t n = gx->size();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) (*gx)[i] += d;
    });
}

template <class T>
int mean_all(Tape<T>& t, int x) {
    const auto& xv = t.value(x);
    require(xv.size() > 0, "mean", "empty tensor");
    T acc = 0;
    for (int64_t i = 0; i < xv.size(); ++i) acc += xv[i];
    const T inv = T(1) / T(xv.size());
    return emit<T>(t, Tensor<T>({1}, {acc * inv}), t.wants_grad(x), "mean",
                   [x, inv](Tape<T>& tt, int id) {
                       auto* gx = tt.grad_if(x);
                       if (!gx) return;
                       const T d = tt.grad(id)[0] * inv;
                       const int64_t n = gx->size();
#pragma omp parallel for schedule(static)
                       for (int64_t i = 0; i < n; ++i) (*gx)[i] += d;
                   });
}

template <class T>
int sum_last(Tape<T>& t, int x) {
    const auto& xv = t.value(x);
    require(xv.rank() >= 1, "sum_last", "needs rank >= 1");
    const int C = xv.shape().back();
    const int64_t outer = xv.size() / C;
    Shape os = xv.shape();
    os.back() = 1;
    Tensor<T> out(os);
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < outer; ++o) {
        T acc = 0;
        for (int c = 0; c < C; ++c) acc += xv[o * C + c];
        out[o] = acc;
    }
    return emit<T>(t, std::move(out), t.wants_grad(x), "sum_last", [x, C, outer](Tape<T>& tt, int id) {
        auto* gx = tt.grad_if(x);
        if (!gx) return;
        const auto& dy = tt.grad(id);
#pragma omp parallel for schedule(static)
        for (int64_t o = 0; o < outer; ++o)
            for (int c = 0; c < C; ++c) (*gx)[o * C + c] += dy[o];
    });
}

template <class T>
int concat_last(Tape<T>& t, int a, int b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    require(av.rank() == bv.rank(), "concat", "rank mismatch");
    for (int i = 0; i + 1 < av.rank(); ++i)
        require(av.dim(i) == bv.dim(i), "concat",
                "shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const int Ca = av.shape().back(), Cb = bv.shape().back();
    Shape os = av.shape();
    os.back() = Ca + Cb;
    Tensor<T> out(os);
    const int64_t outer = av.size() / Ca;
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * (Ca + Cb), av.data() + o * Ca, sizeof(T) * size_t(Ca));
        std::memcpy(out.data() + o * (Ca + Cb) + Ca, bv.data() + o * Cb, sizeof(T) * size_t(Cb));
    }
    bool req = t.wants_grad(a) || t.wants_grad(b);
    return emit<T>(t, std::move(out), req, "concat", [a, b, Ca, Cb, outer](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        if (auto* ga = tt.grad_if(a)) {
#pragma omp parallel for schedule(static)
            for (int64_t o = 0; o < outer; ++o)
                for (int c = 0; c < Ca; ++c) (*ga)[o * Ca + c] += dy[o * (Ca + Cb) + c];
        }
        if (auto* gb = tt.grad_if(b)) {
#pragma omp parallel for schedule(static)
            for (int64_t o = 0; o < outer; ++o)
                for (int c = 0; c < Cb; ++c) (*gb)[o * Cb + c] += dy[o * (Ca + Cb) + Ca + c];
        }
    });
}

template <class T>
int slice_last(Tape<T>& t, int x, int c0, int c1) {
    const auto& xv = t.value(x);
    const int C = xv.shape().back();
    require(0 <= c0 && c0 < c1 && c1 <= C, "slice",
            "bad channel range [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                std::to_string(C));
    const int Cs = c1 - c0;
    Shape os = xv.shape();
    os.back() = Cs;
    Tensor<T> out(os);
    const int64_t outer = xv.size() / C;
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * Cs, xv.data() + o * C + c0, sizeof(T) * size_t(Cs));
    return emit<T>(t, std::move(out), t.wants_grad(x), "slice", [x, c0, C, Cs, outer](Tape<T>& tt, int id) {
        auto* gx = tt.grad_if(x);
        if (!gx) return;
        const auto& dy = tt.grad(id);
#pragma omp parallel for schedule(static)
        for (int64_t o = 0; o < outer; ++o)
            for (int c = 0; c < Cs; ++c) (*gx)[o * C + c0 + c] += dy[o * Cs + c];
    });
}

template <class T>
int reshape(Tape<T>& t, int x, Shape s) {
    const auto& xv = t.value(x);
    require(shape_numel(s) == xv.size(), "reshape",
            "cannot view " + shape_str(xv.shape()) + " as " + shape_str(s));
    Tensor<T> out(std::move(s), xv.vec());
    return emit<T>(t, std::move(out), t.wants_grad(x), "reshape", [x](Tape<T>& tt, int id) {
        auto* gx = tt.grad_if(x);
        if (!gx) return;
        const auto& dy = tt.grad(id);
        const int64_t n = dy.size();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) (*gx)[i] += dy[i];
    });
}

template <class T>
int select_batch(Tape<T>& t, int x, int b) {
    const auto& xv = t.value(x);
    require(xv.rank() >= 2, "select_batch", "needs a leading batch dim");
    const int B = xv.dim(0);
    require(0 <= b && b < B, "select_batch", "index " + std::to_string(b) + " out of " + std::to_string(B));
    Shape os(xv.shape().begin() + 1, xv.shape().end());
    const int64_t stride = xv.size() / B;
    Tensor<T> out(os);
    std::memcpy(out.data(), xv.data() + int64_t(b) * stride, sizeof(T) * size_t(stride));
    return emit<T>(t, std::move(out), t.wants_grad(x), "select_batch",
                   [x, b, stride](Tape<T>& tt, int id) {
                       auto* gx = tt.grad_if(x);
                       if (!gx) return;
                       const auto& dy = tt.grad(id);
                       T* dst = gx->data() + int64_t(b) * stride;
#pragma omp parallel for schedule(static)
                       for (int64_t i = 0; i < stride; ++i) dst[i] += dy[i];
                   });
}

template <class T>
int stack_batch(Tape<T>& t, const std::vector<int>& ids) {
    require(!ids.empty(), "stack_batch", "no members");
    const Shape member = t.value(ids[0]).shape();
    for (int id : ids) check_shapes_match(t.value(id).shape(), member, "stack_batch");
    Shape os;
    os.push_back(int(ids.size()));
    os.insert(os.end(), member.begin(), member.end());
    const int64_t stride = shape_numel(member);
    Tensor<T> out(os);
    bool req = false;
    for (size_t i = 0; i < ids.size(); ++i) {
        std::memcpy(out.data() + int64_t(i) * stride, t.value(ids[i]).data(),
                    sizeof(T) * size_t(stride));
        req = req || t.wants_grad(ids[i]);
    }
    return emit<T>(t, std::move(out), req, "stack_batch", [ids, stride](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        for (size_t i = 0; i < ids.size(); ++i) {
            auto* g = tt.grad_if(ids[i]);
            if (!g) continue;
            const T* src = dy.data() + int64_t(i) * stride;
#pragma omp parallel for schedule(static)
            for (int64_t j = 0; j < stride; ++j) (*g)[j] += src[j];
        }
    });
}

template <class T>
int affine_nc(Tape<T>& t, int x, int scale, int shift) {
    const auto& xv = t.value(x);
    const auto& sv = t.value(scale);
    const auto& bv = t.value(shift);
    require(xv.rank() == 4, "affine_nc", "x must be (B,H,W,C), got " + shape_str(xv.shape()));
    const int B = xv.dim(0), C = xv.dim(3);
    const int64_t HW = int64_t(xv.dim(1)) * xv.dim(2);
    Shape want{B, C};
    require(sv.shape() == want && bv.shape() == want, "affine_nc",
            "scale/shift must be (B,C)=" + shape_str(want) + ", got " + shape_str(sv.shape()) +
                " / " + shape_str(bv.shape()));
    Tensor<T> out(xv.shape());
#pragma omp parallel for schedule(static) collapse(2)
    for (int b = 0; b < B; ++b)
        for (int64_t p = 0; p < HW; ++p) {
            const int64_t base = (b * HW + p) * C;
            for (int c = 0; c < C; ++c) out[base + c] = xv[base + c] * sv[b * C + c] + bv[b * C + c];
        }
    bool req = t.wants_grad(x) || t.wants_grad(scale) || t.wants_grad(shift);
    return emit<T>(t, std::move(out), req, "affine_nc", [x, scale, shift, B, C, HW](Tape<T>& tt, int id) {
        const auto& dy = tt.grad(id);
        const auto& xvv = tt.value(x);
        const auto& svv = tt.value(scale);
        if (auto* gx = tt.grad_if(x)) {
#pragma omp parallel for schedule(static) collapse(2)
            for (int b = 0; b < B; ++b)
                for (int64_t p = 0; p < HW; ++p) {
                    const int64_t base = (b * HW + p) * C;
                    for (int c = 0; c < C; ++c) (*gx)[base + c] += dy[base + c] * svv[b * C + c];
                }
        }
        if (auto* gs = tt.grad_if(scale)) {
#pragma omp parallel for schedule(static) collapse(2)
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t p = 0; p < HW; ++p) acc += dy[(b * HW + p) * C + c] * xvv[(b * HW + p) * C + c];
                    (*gs)[b * C + c] += acc;
                }
        }
        if (auto* gb = tt.grad_if(shift)) {
#pragma omp parallel for schedule(static) collapse(2)
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t p = 0; p < HW; ++p) acc += dy[(b * HW + p) * C + c];
                    (*gb)[b * C + c] += acc;
                }
        }
    });
}

template <class T>
int group_norm(Tape<T>& t, int x, int gamma, int beta, int groups) {
    const auto& xv = t.value(x);
    const auto& gv = t.value(gamma);
    const auto& bv = t.value(beta);
    require(xv.rank() == 4, "group_norm", "x must be (B,H,W,C), got " + shape_str(xv.shape()));
    const int B = xv.dim(0), C = xv.dim(3);
    const int64_t HW = int64_t(xv.dim(1)) * xv.dim(2);
    require(C % groups == 0, "group_norm",
            std::to_string(C) + " channels not divisible by " + std::to_string(groups) + " groups");
    require(gv.shape() == Shape{C} && bv.shape() == Shape{C}, "group_norm", "gamma/beta must be (C,)");
    const int cg = C / groups;
    const T eps = T(1e-5);
    auto stats = std::make_shared<std::vector<T>>(size_t(B) * groups * 2);  // mean, rstd pairs
    Tensor<T> out(xv.shape());
#pragma omp parallel for schedule(static) collapse(2)
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < groups; ++g) {
            T mean = 0, var = 0;
            for (int64_t p = 0; p < HW; ++p)
                for (int c = 0; c < cg; ++c) mean += xv[(b * HW + p) * C + g * cg + c];
            const T inv_n = T(1) / T(HW * cg);
            mean *= inv_n;
            for (int64_t p = 0; p < HW; ++p)
                for (int c = 0; c < cg; ++c) {
                    T d = xv[(b * HW + p) * C + g * cg + c] - mean;
                    var += d * d;
                }
            var *= inv_n;
            const T rstd = T(1) / std::sqrt(var + eps);
            (*stats)[(size_t(b) * groups + g) * 2] = mean;
            (*stats)[(size_t(b) * groups + g) * 2 + 1] = rstd;
            for (int64_t p = 0; p < HW; ++p)
                for (int c = 0; c < cg; ++c) {
                    const int ch = g * cg + c;
                    const int64_t i = (b * HW + p) * C + ch;
                    out[i] = (xv[i] - mean) * rstd * gv[ch] + bv[ch];
                }
        }
    bool req = t.wants_grad(x) || t.wants_grad(gamma) || t.wants_grad(beta);
    return emit<T>(t, std::move(out), req, "group_norm",
                   [x, gamma, beta, B, C, HW, groups, cg, stats](Tape<T>& tt, int id) {
                       const auto& dy = tt.grad(id);
                       const auto& xvv = tt.value(x);
                       const auto& gvv = tt.value(gamma);
                       if (auto* gx = tt.grad_if(x)) {
#pragma omp parallel for schedule(static) collapse(2)
                           for (int b = 0; b < B; ++b)
                               for (int g = 0; g < groups; ++g) {
                                   const T mean = (*stats)[(size_t(b) * groups + g) * 2];
                                   const T rstd = (*stats)[(size_t(b) * groups + g) * 2 + 1];
                                   const T inv_n = T(1) / T(HW * cg);
                                   T sum_dg = 0, sum_dgx = 0;
                                   for (int64_t p = 0; p < HW; ++p)
                                       for (int c = 0; c < cg; ++c) {
                                           const int ch = g * cg + c;
                                           const int64_t i = (b * HW + p) * C + ch;
                                           const T dg = dy[i] * gvv[ch];
                                           sum_dg += dg;
                                           sum_dgx += dg * (xvv[i] - mean) * rstd;
                                       }
                                   for (int64_t p = 0; p < HW; ++p)
                                       for (int c = 0; c < cg; ++c) {
                                           const int ch = g * cg + c;
                                           const int64_t i = (b * HW + p) * C + ch;
                                           const T xhat = (xvv[i] - mean) * rstd;
                                           const T dg = dy[i] * gvv[ch];
                                           (*gx)[i] += rstd * (dg - inv_n * (sum_dg + xhat * sum_dgx));
                                       }
                               }
                       }
                       if (auto* gg = tt.grad_if(gamma)) {
#pragma omp parallel for schedule(static)
                           for (int ch = 0; ch < C; ++ch) {
                               const int g = ch / cg;
                               T acc = 0;
                               for (int b = 0; b < B; ++b) {
                                   const T mean = (*stats)[(size_t(b) * groups + g) * 2];
                                   const T rstd = (*stats)[(size_t(b) * groups + g) * 2 + 1];
                                   for (int64_t p = 0; p < HW; ++p) {
                                       const int64_t i = (b * HW + p) * C + ch;
                                       acc += dy[i] * (xvv[i] - mean) * rstd;
                                   }
                               }
                               (*gg)[ch] += acc;
                           }
                       }
                       if (auto* gb = tt.grad_if(beta)) {
#pragma omp parallel for schedule(static)
                           for (int ch = 0; ch < C; ++ch) {
                               T acc = 0;
                               for (int b = 0; b < B; ++b)
                                   for (int64_t p = 0; p < HW; ++p) acc += dy[(b * HW + p) * C + ch];
                               (*gb)[ch] += acc;
                           }
                       }
                   });
}

template <class T>
int dropout(Tape<T>& t, int x, T rate, RngStream& rng, bool train) {
    const auto& xv = t.value(x);
    require(rate >= T(0) && rate < T(1), "dropout", "rate must be in [0,1)");
    if (!train || rate == T(0)) {
        // identity node keeps graph structure uniform between modes
        Tensor<T> out = xv;
        return emit<T>(t, std::move(out), t.wants_grad(x), "dropout", [x](Tape<T>& tt, int id) {
            auto* gx = tt.grad_if(x);
            if (!gx) return;
            const auto& dy = tt.grad(id);
            const int64_t n = dy.size();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) (*gx)[i] += dy[i];
        });
    }
    const int64_t n = xv.size();
    const T keep = T(1) - rate;
    const T inv_keep = T(1) / keep;
    const uint64_t key = rng.key();
    const uint64_t base = rng.reserve(uint64_t(n));
    auto mask = std::make_shared<std::vector<T>>(size_t(n));
    Tensor<T> out(xv.shape());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const T m = unit_at(key, base + uint64_t(i)) < double(keep) ? inv_keep : T(0);
        (*mask)[size_t(i)] = m;
        out[i] = xv[i] * m;
    }
    return emit<T>(t, std::move(out), t.wants_grad(x), "dropout", [x, mask, n](Tape<T>& tt, int id) {
        auto* gx = tt.grad_if(x);
        if (!gx) return;
        const auto& dy = tt.grad(id);
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) (*gx)[i] += dy[i] * (*mask)[size_t(i)];
    });
}

// ---------------------------------------------------------------- grad check

double grad_check(const std::function<int(Tape<double>&, const std::vector<int>&)>& f,
                  const std::vector<Tensor<double>>& inputs, double eps, int64_t max_elems,
                  uint64_t subset_seed) {
    if (eps < 1e-7 || eps > 1e-4) throw std::runtime_error("grad_check: eps must be in [1e-7,1e-4]");
    Tape<double> tape;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) ids.push_back(tape.leaf(in, true));
    const int root = f(tape, ids);
    if (tape.value(root).size() != 1) throw std::runtime_error("grad_check: f must return a scalar");
    if (!std::isfinite(tape.value(root)[0])) throw std::runtime_error("grad_check: f(x) is non-finite");
    tape.backward(root);
    std::vector<Tensor<double>> analytic;
    for (int id : ids) analytic.push_back(tape.grad(id));

    auto eval = [&](const std::vector<Tensor<double>>& pts) {
        Tape<double> tp;
        std::vector<int> pid;
        for (const auto& in : pts) pid.push_back(tp.leaf(in, false));
        return tp.value(f(tp, pid))[0];
    };

    int64_t total = 0;
    for (const auto& in : inputs) total += in.size();
    std::vector<std::pair<size_t, int64_t>> elems;  // (input idx, flat elem)
    if (max_elems > 0 && total > max_elems) {
        RngStream rs(subset_seed);
        for (int64_t k = 0; k < max_elems; ++k) {
            int64_t flat = int64_t(rs.next_u64() % uint64_t(total));
            for (size_t i = 0; i < inputs.size(); ++i) {
                if (flat < inputs[i].size()) { elems.emplace_back(i, flat); break; }
                flat -= inputs[i].size();
            }
        }
    } else {
        for (size_t i = 0; i < inputs.size(); ++i)
            for (int64_t e = 0; e < inputs[i].size(); ++e) elems.emplace_back(i, e);
    }

    double worst = 0;
    std::vector<Tensor<double>> pts = inputs;
    for (auto [i, e] : elems) {
        const double orig = pts[i][e];
        pts[i][e] = orig + eps;
        const double fp = eval(pts);
        pts[i][e] = orig - eps;
        const double fm = eval(pts);
        pts[i][e] = orig;
        const double central = (fp - fm) / (2 * eps);
        const double a = analytic[i][e];
        const double rel = std::abs(a - central) / std::max({std::abs(a), std::abs(central), 1e-12});
        worst = std::max(worst, rel);
    }
    return worst;
}

// ------------------------------------------------------------- instantiation

#define CBDIFF_INSTANTIATE_TAPE(T)                                          \
    template class Tape<T>;                                                 \
    template int add<T>(Tape<T>&, int, int);                                \
    template int sub<T>(Tape<T>&, int, int);                                \
    template int mul<T>(Tape<T>&, int, int);                                \
    template int div_<T>(Tape<T>&, int, int);                               \
    template int add_const<T>(Tape<T>&, int, T);                            \
    template int scale_const<T>(Tape<T>&, int, T);                          \
    template int exp_<T>(Tape<T>&, int);                                    \
    template int log_<T>(Tape<T>&, int);                                    \
    template int sigmoid_<T>(Tape<T>&, int);                                \
    template int silu_<T>(Tape<T>&, int);                                   \
    template int clamp_min<T>(Tape<T>&, int, T);                            \
    template int matmul<T>(Tape<T>&, int, int);                             \
    template int matmul_nt<T>(Tape<T>&, int, int);                          \
    template int add_rowvec<T>(Tape<T>&, int, int);                         \
    template int conv2d<T>(Tape<T>&, int, int, int, int);                   \
    template int upsample2x<T>(Tape<T>&, int);                              \
    template int softmax<T>(Tape<T>&, int, int);                            \
    template int sum_all<T>(Tape<T>&, int);                                 \
    template int mean_all<T>(Tape<T>&, int);                                \
    template int sum_last<T>(Tape<T>&, int);                                \
    template int concat_last<T>(Tape<T>&, int, int);                        \
    template int slice_last<T>(Tape<T>&, int, int, int);                    \
    template int reshape<T>(Tape<T>&, int, Shape);                          \
    template int select_batch<T>(Tape<T>&, int, int);                       \
    template int stack_batch<T>(Tape<T>&, const std::vector<int>&);         \
    template int affine_nc<T>(Tape<T>&, int, int, int);                     \
    template int group_norm<T>(Tape<T>&, int, int, int, int);               \
    template int dropout<T>(Tape<T>&, int, T, RngStream&, bool);

CBDIFF_INSTANTIATE_TAPE(float)
CBDIFF_INSTANTIATE_TAPE(double)

}  // namespace cbdiff
