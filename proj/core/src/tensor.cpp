#include "diffaug/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>

namespace diffaug {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapMC = Eigen::Map<const MatRM>;

int64_t dims_numel(const Dims& d) {
    int64_t n = 1;
    for (int v : d) n *= v;
    return n;
}

std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
    os << "]";
    return os.str();
}

namespace {

void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dims() != b.dims()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    dims_str(a.dims()) + " vs " + dims_str(b.dims()));
    }
}

}  // namespace

// ---- Tensor handle ----

const Dims& Tensor::dims() const { return tape_->node(id_).shape; }
int64_t Tensor::size() const { return tape_->node(id_).n; }
const float* Tensor::data() const { return tape_->node(id_).val; }
const float* Tensor::grad_data() const {
    const auto& nd = tape_->node(id_);
    return nd.grad.empty() ? nullptr : nd.grad.data();
}
float Tensor::scalar() const {
    check(size() == 1, "scalar(): tensor is not a single element");
    return data()[0];
}

// ---- Tape ----

Tensor Tape::alloc(const Dims& d, bool needs_grad) {
    nodes_.emplace_back();
    Node& nd = nodes_.back();
    nd.shape = d;
    nd.n = dims_numel(d);
    nd.storage.resize(static_cast<size_t>(nd.n));
    nd.val = nd.storage.data();
    nd.needs_grad = needs_grad && grad_enabled_;
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::input(const Dims& d, const float* src) {
    Tensor t = alloc(d, false);
    std::memcpy(mutable_val(t), src, sizeof(float) * t.size());
    return t;
}

Tensor Tape::input(const Dims& d, const std::vector<float>& v) {
    check(dims_numel(d) == static_cast<int64_t>(v.size()), "input: size mismatch");
    return input(d, v.data());
}

Tensor Tape::input_borrow(const Dims& d, const float* src) {
    nodes_.emplace_back();
    Node& nd = nodes_.back();
    nd.shape = d;
    nd.n = dims_numel(d);
    nd.val = src;
    nd.needs_grad = false;
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::leaf_grad(const Dims& d, const float* src) {
    Tensor t = alloc(d, true);
    std::memcpy(mutable_val(t), src, sizeof(float) * t.size());
    return t;
}

Tensor Tape::param(Param& p) {
    nodes_.emplace_back();
    Node& nd = nodes_.back();
    nd.shape = p.shape;
    nd.n = p.size();
    nd.val = p.value.data();
    nd.needs_grad = p.trainable && grad_enabled_;
    nd.bound = &p;
    int id = static_cast<int>(nodes_.size()) - 1;
    if (nd.needs_grad) bound_.emplace_back(&p, id);
    return Tensor(this, id);
}

Tensor Tape::zeros(const Dims& d) {
    Tensor t = alloc(d, false);
    std::fill_n(mutable_val(t), t.size(), 0.0f);
    return t;
}

void Tape::set_back(Tensor t, std::function<void()> fn) {
    if (node(t.id()).needs_grad) node(t.id()).back = std::move(fn);
}

float* Tape::mutable_val(Tensor t) {
    Node& nd = node(t.id());
    check(!nd.storage.empty(), "mutable_val on borrowed node");
    return nd.storage.data();
}

float* Tape::grad_buffer(int id) {
    Node& nd = nodes_[id];
    if (nd.grad.empty()) nd.grad.assign(static_cast<size_t>(nd.n), 0.0f);
    return nd.grad.data();
}

void Tape::accum_grad(int id, const float* src, int64_t n) {
    Node& nd = nodes_[id];
    if (!nd.needs_grad) return;
    check(n == nd.n, "accum_grad: size mismatch");
    float* g = grad_buffer(id);
    for (int64_t i = 0; i < n; ++i) g[i] += src[i];
}

void Tape::backward(Tensor root) {
    check(root.tape() == this, "backward: foreign tensor");
    check(root.size() == 1, "backward: root must be scalar");
    check(!backward_done_, "backward: tape already swept");
    backward_done_ = true;
    grad_buffer(root.id())[0] = 1.0f;
    for (int id = root.id(); id >= 0; --id) {
        Node& nd = nodes_[id];
        if (nd.back && !nd.grad.empty()) nd.back();
    }
}

void Tape::accumulate_param_grads(float scale) {
    for (auto& [p, id] : bound_) {
        Node& nd = nodes_[id];
        if (nd.grad.empty()) continue;
        for (int64_t i = 0; i < nd.n; ++i) p->grad[i] += scale * nd.grad[i];
    }
}

// ---- elementwise ----

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(Tensor a, const char* /*name*/, Fwd fwd, Bwd bwd_factory) {
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id());
    Tensor out = T.alloc(a.dims(), g);
    const float* av = a.data();
    float* ov = T.mutable_val(out);
    int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i]);
    if (g) T.set_back(out, bwd_factory(T, a, out));
    return out;
}

}  // namespace

Tensor add(Tensor a, Tensor b) {
    check_same_shape(a, b, "add");
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id()) || T.wants_grad(b.id());
    Tensor out = T.alloc(a.dims(), g);
    const float* av = a.data();
    const float* bv = b.data();
    float* ov = T.mutable_val(out);
    for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] + bv[i];
    if (g) {
        T.set_back(out, [&T, ai = a.id(), bi = b.id(), oi = out.id(), n = out.size()] {
            const float* og = T.node(oi).grad.data();
            T.accum_grad(ai, og, n);
            T.accum_grad(bi, og, n);
        });
    }
    return out;
}

Tensor sub(Tensor a, Tensor b) { return axpby(1.0f, a, -1.0f, b); }

Tensor mul(Tensor a, Tensor b) {
    check_same_shape(a, b, "mul");
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id()) || T.wants_grad(b.id());
    Tensor out = T.alloc(a.dims(), g);
    const float* av = a.data();
    const float* bv = b.data();
    float* ov = T.mutable_val(out);
    for (int64_t i = 0; i < out.size(); ++i) ov[i] = av[i] * bv[i];
    if (g) {
        T.set_back(out, [&T, ai = a.id(), bi = b.id(), oi = out.id(), n = out.size()] {
            const float* og = T.node(oi).grad.data();
            const float* av2 = T.node(ai).val;
            const float* bv2 = T.node(bi).val;
            if (T.wants_grad(ai)) {
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += og[i] * bv2[i];
            }
            if (T.wants_grad(bi)) {
                float* gb = T.grad_buffer(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] += og[i] * av2[i];
            }
        });
    }
    return out;
}

Tensor axpby(float alpha, Tensor a, float beta, Tensor b) {
    check_same_shape(a, b, "axpby");
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id()) || T.wants_grad(b.id());
    Tensor out = T.alloc(a.dims(), g);
    const float* av = a.data();
    const float* bv = b.data();
    float* ov = T.mutable_val(out);
    for (int64_t i = 0; i < out.size(); ++i) ov[i] = alpha * av[i] + beta * bv[i];
    if (g) {
        T.set_back(out, [&T, alpha, beta, ai = a.id(), bi = b.id(), oi = out.id(), n = out.size()] {
            const float* og = T.node(oi).grad.data();
            if (T.wants_grad(ai)) {
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += alpha * og[i];
            }
            if (T.wants_grad(bi)) {
                float* gb = T.grad_buffer(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] += beta * og[i];
            }
        });
    }
    return out;
}

Tensor scale(Tensor a, float s) {
    return unary_op(
        a, "scale", [s](float x) { return s * x; },
        [s](Tape& T, Tensor a2, Tensor out) {
            return [&T, s, ai = a2.id(), oi = out.id(), n = out.size()] {
                const float* og = T.node(oi).grad.data();
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += s * og[i];
            };
        });
}

Tensor add_scalar(Tensor a, float s) {
    return unary_op(
        a, "add_scalar", [s](float x) { return x + s; },
        [](Tape& T, Tensor a2, Tensor out) {
            return [&T, ai = a2.id(), oi = out.id(), n = out.size()] {
                T.accum_grad(ai, T.node(oi).grad.data(), n);
            };
        });
}

Tensor relu(Tensor a) {
    return unary_op(
        a, "relu", [](float x) { return x > 0.0f ? x : 0.0f; },
        [](Tape& T, Tensor a2, Tensor out) {
            return [&T, ai = a2.id(), oi = out.id(), n = out.size()] {
                const float* og = T.node(oi).grad.data();
                const float* av = T.node(ai).val;
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i)
                    if (av[i] > 0.0f) ga[i] += og[i];
            };
        });
}

Tensor silu(Tensor a) {
    return unary_op(
        a, "silu",
        [](float x) {
            float s = 1.0f / (1.0f + std::exp(-x));
            return x * s;
        },
        [](Tape& T, Tensor a2, Tensor out) {
            return [&T, ai = a2.id(), oi = out.id(), n = out.size()] {
                const float* og = T.node(oi).grad.data();
                const float* av = T.node(ai).val;
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) {
                    float s = 1.0f / (1.0f + std::exp(-av[i]));
                    ga[i] += og[i] * s * (1.0f + av[i] * (1.0f - s));
                }
            };
        });
}

Tensor sigmoid(Tensor a) {
    return unary_op(
        a, "sigmoid", [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](Tape& T, Tensor a2, Tensor out) {
            return [&T, ai = a2.id(), oi = out.id(), n = out.size()] {
                const float* og = T.node(oi).grad.data();
                const float* yv = T.node(oi).val;
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += og[i] * yv[i] * (1.0f - yv[i]);
            };
        });
}

Tensor square(Tensor a) {
    return unary_op(
        a, "square", [](float x) { return x * x; },
        [](Tape& T, Tensor a2, Tensor out) {
            return [&T, ai = a2.id(), oi = out.id(), n = out.size()] {
                const float* og = T.node(oi).grad.data();
                const float* av = T.node(ai).val;
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += og[i] * 2.0f * av[i];
            };
        });
}

// ---- shape ----

Tensor reshape(Tensor a, const Dims& d) {
    Tape& T = *a.tape();
    check(dims_numel(d) == a.size(), "reshape: element count mismatch");
    bool g = T.wants_grad(a.id());
    // Borrow the buffer; backward is identity.
    Tensor out(&T, -1);
    {
        Tensor tmp = T.input_borrow(d, a.data());
        out = tmp;
    }
    Tape::Node& nd = T.node(out.id());
    nd.needs_grad = g;
    if (g) {
        T.set_back(out, [&T, ai = a.id(), oi = out.id(), n = a.size()] {
            T.accum_grad(ai, T.node(oi).grad.data(), n);
        });
    }
    return out;
}

Tensor concat_channels(Tensor a, Tensor b) {
    const Dims& da = a.dims();
    const Dims& db = b.dims();
    check(da.size() == 4 && db.size() == 4, "concat_channels: want 4-d");
    check(da[0] == db[0] && da[2] == db[2] && da[3] == db[3],
          "concat_channels: incompatible shapes");
    Tape& T = *a.tape();
    int B = da[0], Ca = da[1], Cb = db[1], H = da[2], W = da[3];
    int64_t hw = static_cast<int64_t>(H) * W;
    bool g = T.wants_grad(a.id()) || T.wants_grad(b.id());
    Tensor out = T.alloc({B, Ca + Cb, H, W}, g);
    float* ov = T.mutable_val(out);
    const float* av = a.data();
    const float* bv = b.data();
    for (int n = 0; n < B; ++n) {
        std::memcpy(ov + n * (Ca + Cb) * hw, av + n * Ca * hw, sizeof(float) * Ca * hw);
        std::memcpy(ov + n * (Ca + Cb) * hw + Ca * hw, bv + n * Cb * hw,
                    sizeof(float) * Cb * hw);
    }
    if (g) {
        T.set_back(out, [&T, ai = a.id(), bi = b.id(), oi = out.id(), B, Ca, Cb, hw] {
            const float* og = T.node(oi).grad.data();
            if (T.wants_grad(ai)) {
                float* ga = T.grad_buffer(ai);
                for (int n = 0; n < B; ++n)
                    for (int64_t i = 0; i < Ca * hw; ++i)
                        ga[n * Ca * hw + i] += og[n * (Ca + Cb) * hw + i];
            }
            if (T.wants_grad(bi)) {
                float* gb = T.grad_buffer(bi);
                for (int n = 0; n < B; ++n)
                    for (int64_t i = 0; i < Cb * hw; ++i)
                        gb[n * Cb * hw + i] += og[n * (Ca + Cb) * hw + Ca * hw + i];
            }
        });
    }
    return out;
}

Tensor concat_rows(Tensor a, Tensor b) {
    const Dims& da = a.dims();
    const Dims& db = b.dims();
    check(da.size() == 2 && db.size() == 2 && da[1] == db[1], "concat_rows: want [R,C]");
    Tape& T = *a.tape();
    int Ra = da[0], Rb = db[0], C = da[1];
    bool g = T.wants_grad(a.id()) || T.wants_grad(b.id());
    Tensor out = T.alloc({Ra + Rb, C}, g);
    float* ov = T.mutable_val(out);
    std::memcpy(ov, a.data(), sizeof(float) * Ra * C);
    std::memcpy(ov + static_cast<int64_t>(Ra) * C, b.data(), sizeof(float) * Rb * C);
    if (g) {
        T.set_back(out, [&T, ai = a.id(), bi = b.id(), oi = out.id(), Ra, Rb, C] {
            const float* og = T.node(oi).grad.data();
            if (T.wants_grad(ai)) T.accum_grad(ai, og, static_cast<int64_t>(Ra) * C);
            if (T.wants_grad(bi))
                T.accum_grad(bi, og + static_cast<int64_t>(Ra) * C,
                             static_cast<int64_t>(Rb) * C);
        });
    }
    return out;
}

Tensor take_rows(Tensor table, std::vector<int> idx) {
    const Dims& dt = table.dims();
    check(dt.size() == 2, "take_rows: table must be [K,E]");
    int K = dt[0], E = dt[1];
    for (int i : idx) check(i >= 0 && i < K, "take_rows: index out of range");
    Tape& T = *table.tape();
    bool g = T.wants_grad(table.id());
    Tensor out = T.alloc({static_cast<int>(idx.size()), E}, g);
    float* ov = T.mutable_val(out);
    const float* tv = table.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(ov + r * E, tv + static_cast<int64_t>(idx[r]) * E, sizeof(float) * E);
    if (g) {
        T.set_back(out, [&T, ti = table.id(), oi = out.id(), idx = std::move(idx), E] {
            const float* og = T.node(oi).grad.data();
            float* gt = T.grad_buffer(ti);
            for (size_t r = 0; r < idx.size(); ++r)
                for (int e = 0; e < E; ++e)
                    gt[static_cast<int64_t>(idx[r]) * E + e] += og[r * E + e];
        });
    }
    return out;
}

Tensor chw_to_tokens(Tensor x) {
    const Dims& d = x.dims();
    check(d.size() == 4, "chw_to_tokens: want [B,C,H,W]");
    int B = d[0], C = d[1];
    int64_t hw = static_cast<int64_t>(d[2]) * d[3];
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id());
    Tensor out = T.alloc({B, static_cast<int>(hw), C}, g);
    const float* xv = x.data();
    float* ov = T.mutable_val(out);
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < hw; ++i)
                ov[(n * hw + i) * C + c] = xv[(static_cast<int64_t>(n) * C + c) * hw + i];
    if (g) {
        T.set_back(out, [&T, xi = x.id(), oi = out.id(), B, C, hw] {
            const float* og = T.node(oi).grad.data();
            float* gx = T.grad_buffer(xi);
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c)
                    for (int64_t i = 0; i < hw; ++i)
                        gx[(static_cast<int64_t>(n) * C + c) * hw + i] +=
                            og[(n * hw + i) * C + c];
        });
    }
    return out;
}

Tensor tokens_to_chw(Tensor x, int h, int w) {
    const Dims& d = x.dims();
    check(d.size() == 3 && d[1] == h * w, "tokens_to_chw: shape mismatch");
    int B = d[0], C = d[2];
    int64_t hw = static_cast<int64_t>(h) * w;
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id());
    Tensor out = T.alloc({B, C, h, w}, g);
    const float* xv = x.data();
    float* ov = T.mutable_val(out);
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < hw; ++i)
                ov[(static_cast<int64_t>(n) * C + c) * hw + i] = xv[(n * hw + i) * C + c];
    if (g) {
        T.set_back(out, [&T, xi = x.id(), oi = out.id(), B, C, hw] {
            const float* og = T.node(oi).grad.data();
            float* gx = T.grad_buffer(xi);
            for (int n = 0; n < B; ++n)
                for (int c = 0; c < C; ++c)
                    for (int64_t i = 0; i < hw; ++i)
                        gx[(n * hw + i) * C + c] +=
                            og[(static_cast<int64_t>(n) * C + c) * hw + i];
        });
    }
    return out;
}

Tensor select_sample(Tensor x, int n) {
    const Dims& d = x.dims();
    check(!d.empty() && n >= 0 && n < d[0], "select_sample: index out of range");
    int64_t stride = x.size() / d[0];
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id());
    Dims od = d;
    od[0] = 1;
    Tensor out = T.input_borrow(od, x.data() + n * stride);
    T.node(out.id()).needs_grad = g;
    if (g) {
        T.set_back(out, [&T, xi = x.id(), oi = out.id(), n, stride] {
            const float* og = T.node(oi).grad.data();
            float* gx = T.grad_buffer(xi);
            for (int64_t i = 0; i < stride; ++i) gx[n * stride + i] += og[i];
        });
    }
    return out;
}

Tensor stack(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "stack: empty list");
    Tape& T = *xs[0].tape();
    const Dims& d0 = xs[0].dims();
    bool g = false;
    for (const auto& t : xs) {
        check(t.dims() == d0, "stack: shape mismatch");
        g = g || T.wants_grad(t.id());
    }
    Dims od;
    od.push_back(static_cast<int>(xs.size()));
    od.insert(od.end(), d0.begin(), d0.end());
    Tensor out = T.alloc(od, g);
    int64_t stride = xs[0].size();
    float* ov = T.mutable_val(out);
    for (size_t i = 0; i < xs.size(); ++i)
        std::memcpy(ov + i * stride, xs[i].data(), sizeof(float) * stride);
    if (g) {
        std::vector<int> ids(xs.size());
        for (size_t i = 0; i < xs.size(); ++i) ids[i] = xs[i].id();
        T.set_back(out, [&T, ids = std::move(ids), oi = out.id(), stride] {
            const float* og = T.node(oi).grad.data();
            for (size_t i = 0; i < ids.size(); ++i)
                T.accum_grad(ids[i], og + i * stride, stride);
        });
    }
    return out;
}

Tensor mean_rows(Tensor x) {
    const Dims& d = x.dims();
    check(d.size() == 2, "mean_rows: want [R,C]");
    int R = d[0], C = d[1];
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id());
    Tensor out = T.alloc({1, C}, g);
    const float* xv = x.data();
    float* ov = T.mutable_val(out);
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int r = 0; r < R; ++r) s += xv[static_cast<int64_t>(r) * C + c];
        ov[c] = static_cast<float>(s / R);
    }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), oi = out.id(), R, C] {
            const float* og = T.node(oi).grad.data();
            float* gx = T.grad_buffer(xi);
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c)
                    gx[static_cast<int64_t>(r) * C + c] += og[c] / static_cast<float>(R);
        });
    }
    return out;
}

Tensor repeat_row(Tensor row, int r) {
    int C = static_cast<int>(row.size());
    Tape& T = *row.tape();
    bool g = T.wants_grad(row.id());
    Tensor out = T.alloc({r, C}, g);
    float* ov = T.mutable_val(out);
    for (int i = 0; i < r; ++i) std::memcpy(ov + static_cast<int64_t>(i) * C, row.data(), sizeof(float) * C);
    if (g) {
        T.set_back(out, [&T, ri = row.id(), oi = out.id(), r, C] {
            const float* og = T.node(oi).grad.data();
            float* gr = T.grad_buffer(ri);
            for (int i = 0; i < r; ++i)
                for (int c = 0; c < C; ++c) gr[c] += og[static_cast<int64_t>(i) * C + c];
        });
    }
    return out;
}

// ---- linear ----

Tensor linear(Tensor x, Tensor w, Tensor b) {
    const Dims& dx = x.dims();
    const Dims& dw = w.dims();
    check(dw.size() == 2, "linear: weight must be [out,in]");
    int in = dw[1], out_dim = dw[0];
    check(!dx.empty() && dx.back() == in, "linear: input last dim mismatch");
    int64_t rows = x.size() / in;
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id()) || T.wants_grad(w.id()) ||
             (b.defined() && T.wants_grad(b.id()));
    Dims od = dx;
    od.back() = out_dim;
    Tensor out = T.alloc(od, g);

    MapMC X(x.data(), rows, in);
    MapMC W(w.data(), out_dim, in);
    MapM Y(T.mutable_val(out), rows, out_dim);
    Y.noalias() = X * W.transpose();
    if (b.defined()) {
        check(b.size() == out_dim, "linear: bias size mismatch");
        MapMC B(b.data(), 1, out_dim);
        Y.rowwise() += B.row(0);
    }
    if (g) {
        int bi = b.defined() ? b.id() : -1;
        T.set_back(out, [&T, xi = x.id(), wi = w.id(), bi, oi = out.id(), rows, in, out_dim] {
            MapMC dY(T.node(oi).grad.data(), rows, out_dim);
            if (T.wants_grad(xi)) {
                MapM dX(T.grad_buffer(xi), rows, in);
                MapMC W2(T.node(wi).val, out_dim, in);
                dX.noalias() += dY * W2;
            }
            if (T.wants_grad(wi)) {
                MapM dW(T.grad_buffer(wi), out_dim, in);
                MapMC X2(T.node(xi).val, rows, in);
                dW.noalias() += dY.transpose() * X2;
            }
            if (bi >= 0 && T.wants_grad(bi)) {
                float* db = T.grad_buffer(bi);
                for (int o = 0; o < out_dim; ++o) {
                    double s = 0.0;
                    for (int64_t r = 0; r < rows; ++r) s += dY(r, o);
                    db[o] += static_cast<float>(s);
                }
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(Tensor a) {
    const Dims& d = a.dims();
    int cols = d.back();
    int64_t rows = a.size() / cols;
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id());
    Tensor out = T.alloc(d, g);
    const float* av = a.data();
    float* ov = T.mutable_val(out);
    for (int64_t r = 0; r < rows; ++r) {
        const float* x = av + r * cols;
        float* y = ov + r * cols;
        float mx = *std::max_element(x, x + cols);
        double sum = 0.0;
        for (int c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        float inv = static_cast<float>(1.0 / sum);
        for (int c = 0; c < cols; ++c) y[c] *= inv;
    }
    if (g) {
        T.set_back(out, [&T, ai = a.id(), oi = out.id(), rows, cols] {
            const float* og = T.node(oi).grad.data();
            const float* yv = T.node(oi).val;
            float* ga = T.grad_buffer(ai);
            for (int64_t r = 0; r < rows; ++r) {
                const float* y = yv + r * cols;
                const float* dy = og + r * cols;
                float* dx = ga + r * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += static_cast<double>(dy[c]) * y[c];
                for (int c = 0; c < cols; ++c)
                    dx[c] += y[c] * (dy[c] - static_cast<float>(dot));
            }
        });
    }
    return out;
}

Tensor rmsnorm_rows(Tensor x, Tensor gain) {
    const Dims& d = x.dims();
    int E = d.back();
    check(gain.size() == E, "rmsnorm_rows: gain size mismatch");
    int64_t rows = x.size() / E;
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id()) || T.wants_grad(gain.id());
    Tensor out = T.alloc(d, g);
    const float* xv = x.data();
    const float* gv = gain.data();
    float* ov = T.mutable_val(out);
    std::vector<float> rinv(rows);
    const float eps = 1e-6f;
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv + r * E;
        double ss = 0.0;
        for (int e = 0; e < E; ++e) ss += static_cast<double>(xr[e]) * xr[e];
        float ri = static_cast<float>(1.0 / std::sqrt(ss / E + eps));
        rinv[r] = ri;
        for (int e = 0; e < E; ++e) ov[r * E + e] = xr[e] * ri * gv[e];
    }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), gi = gain.id(), oi = out.id(), rows, E,
                         rinv = std::move(rinv)] {
            const float* og = T.node(oi).grad.data();
            const float* xv2 = T.node(xi).val;
            const float* gv2 = T.node(gi).val;
            for (int64_t r = 0; r < rows; ++r) {
                const float* xr = xv2 + r * E;
                const float* dyr = og + r * E;
                float ri = rinv[r];
                if (T.wants_grad(gi)) {
                    float* gg = T.grad_buffer(gi);
                    for (int e = 0; e < E; ++e) gg[e] += dyr[e] * xr[e] * ri;
                }
                if (T.wants_grad(xi)) {
                    float* gx = T.grad_buffer(xi) + r * E;
                    double dot = 0.0;
                    for (int e = 0; e < E; ++e)
                        dot += static_cast<double>(dyr[e]) * gv2[e] * xr[e];
                    float coef = static_cast<float>(dot) * ri * ri * ri / E;
                    for (int e = 0; e < E; ++e)
                        gx[e] += dyr[e] * gv2[e] * ri - coef * xr[e];
                }
            }
        });
    }
    return out;
}

Tensor attention(Tensor q, Tensor k, Tensor v) {
    const Dims& dq = q.dims();
    const Dims& dk = k.dims();
    const Dims& dv = v.dims();
    check(dq.size() == 3 && dk.size() == 3 && dv.size() == 3, "attention: want [B,T,d]");
    int B = dq[0], Tq = dq[1], dd = dq[2];
    int S = dk[1];
    check(dk[0] == B && dv[0] == B && dk[2] == dd && dv[1] == S && dv[2] == dd,
          "attention: incompatible shapes");
    Tape& T = *q.tape();
    bool g = T.wants_grad(q.id()) || T.wants_grad(k.id()) || T.wants_grad(v.id());
    Tensor out = T.alloc({B, Tq, dd}, g);
    float sc = 1.0f / std::sqrt(static_cast<float>(dd));

    auto attn_weights = std::make_shared<std::vector<float>>(
        static_cast<size_t>(B) * Tq * S);
    const float* qv = q.data();
    const float* kv = k.data();
    const float* vv = v.data();
    float* ov = T.mutable_val(out);
#pragma omp parallel for schedule(static)
    for (int b = 0; b < B; ++b) {
        MapMC Q(qv + static_cast<int64_t>(b) * Tq * dd, Tq, dd);
        MapMC K(kv + static_cast<int64_t>(b) * S * dd, S, dd);
        MapMC V(vv + static_cast<int64_t>(b) * S * dd, S, dd);
        MapM A(attn_weights->data() + static_cast<int64_t>(b) * Tq * S, Tq, S);
        A.noalias() = Q * K.transpose() * sc;
        // explicit scalar softmax keeps summation order independent of the
        // buffer's heap alignment (bit-stable across identical runs)
        for (int t = 0; t < Tq; ++t) {
            float* row = A.data() + static_cast<int64_t>(t) * S;
            float mx = row[0];
            for (int s = 1; s < S; ++s) mx = std::max(mx, row[s]);
            double sum = 0.0;
            for (int s = 0; s < S; ++s) {
                row[s] = std::exp(row[s] - mx);
                sum += row[s];
            }
            float inv = static_cast<float>(1.0 / sum);
            for (int s = 0; s < S; ++s) row[s] *= inv;
        }
        MapM O(ov + static_cast<int64_t>(b) * Tq * dd, Tq, dd);
        O.noalias() = A * V;
    }
    if (g) {
        T.set_back(out, [&T, qi = q.id(), ki = k.id(), vi = v.id(), oi = out.id(), B, Tq,
                         S, dd, sc, attn_weights] {
            const float* og = T.node(oi).grad.data();
            const float* qv2 = T.node(qi).val;
            const float* kv2 = T.node(ki).val;
            const float* vv2 = T.node(vi).val;
            bool wq = T.wants_grad(qi), wk = T.wants_grad(ki), wv = T.wants_grad(vi);
            float* gq = wq ? T.grad_buffer(qi) : nullptr;
            float* gk = wk ? T.grad_buffer(ki) : nullptr;
            float* gv = wv ? T.grad_buffer(vi) : nullptr;
#pragma omp parallel for schedule(static)
            for (int b = 0; b < B; ++b) {
                MapMC A(attn_weights->data() + static_cast<int64_t>(b) * Tq * S, Tq, S);
                MapMC dO(og + static_cast<int64_t>(b) * Tq * dd, Tq, dd);
                MapMC V(vv2 + static_cast<int64_t>(b) * S * dd, S, dd);
                MapMC Q(qv2 + static_cast<int64_t>(b) * Tq * dd, Tq, dd);
                MapMC K(kv2 + static_cast<int64_t>(b) * S * dd, S, dd);
                if (wv) {
                    MapM dV(gv + static_cast<int64_t>(b) * S * dd, S, dd);
                    dV.noalias() += A.transpose() * dO;
                }
                if (wq || wk) {
                    MatRM dA = dO * V.transpose();  // [Tq,S]
                    MatRM dZ(Tq, S);                // softmax backward
                    for (int t = 0; t < Tq; ++t) {
                        double dot = 0.0;
                        for (int s = 0; s < S; ++s)
                            dot += static_cast<double>(dA(t, s)) * A(t, s);
                        for (int s = 0; s < S; ++s)
                            dZ(t, s) = A(t, s) * (dA(t, s) - static_cast<float>(dot)) * sc;
                    }
                    if (wq) {
                        MapM dQ(gq + static_cast<int64_t>(b) * Tq * dd, Tq, dd);
                        dQ.noalias() += dZ * K;
                    }
                    if (wk) {
                        MapM dK(gk + static_cast<int64_t>(b) * S * dd, S, dd);
                        dK.noalias() += dZ.transpose() * Q;
                    }
                }
            }
        });
    }
    return out;
}

// ---- convolution ----

namespace {

struct ConvDims {
    int B, C, H, W, O, KH, KW, OH, OW, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    const Dims& dx = x.dims();
    const Dims& dw = w.dims();
    check(dx.size() == 4, "conv2d: input must be [B,C,H,W]");
    check(dw.size() == 4, "conv2d: weight must be [O,C,KH,KW]");
    check(dx[1] == dw[1], "conv2d: channel mismatch");
    ConvDims cd;
    cd.B = dx[0];
    cd.C = dx[1];
    cd.H = dx[2];
    cd.W = dx[3];
    cd.O = dw[0];
    cd.KH = dw[2];
    cd.KW = dw[3];
    cd.stride = stride;
    cd.pad = pad;
    cd.OH = (cd.H + 2 * pad - cd.KH) / stride + 1;
    cd.OW = (cd.W + 2 * pad - cd.KW) / stride + 1;
    check(cd.OH > 0 && cd.OW > 0, "conv2d: empty output");
    return cd;
}

// cols layout: [C*KH*KW, OH*OW]
void im2col(const float* x, const ConvDims& cd, float* cols) {
    int ohw = cd.OH * cd.OW;
    for (int c = 0; c < cd.C; ++c) {
        for (int kh = 0; kh < cd.KH; ++kh) {
            for (int kw = 0; kw < cd.KW; ++kw) {
                float* dst = cols + ((c * cd.KH + kh) * cd.KW + kw) * ohw;
                for (int oh = 0; oh < cd.OH; ++oh) {
                    int ih = oh * cd.stride + kh - cd.pad;
                    if (ih < 0 || ih >= cd.H) {
                        std::fill_n(dst + oh * cd.OW, cd.OW, 0.0f);
                        continue;
                    }
                    const float* src = x + (c * cd.H + ih) * cd.W;
                    for (int ow = 0; ow < cd.OW; ++ow) {
                        int iw = ow * cd.stride + kw - cd.pad;
                        dst[oh * cd.OW + ow] =
                            (iw >= 0 && iw < cd.W) ? src[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_accum(const float* cols, const ConvDims& cd, float* dx) {
    int ohw = cd.OH * cd.OW;
    for (int c = 0; c < cd.C; ++c) {
        for (int kh = 0; kh < cd.KH; ++kh) {
            for (int kw = 0; kw < cd.KW; ++kw) {
                const float* src = cols + ((c * cd.KH + kh) * cd.KW + kw) * ohw;
                for (int oh = 0; oh < cd.OH; ++oh) {
                    int ih = oh * cd.stride + kh - cd.pad;
                    if (ih < 0 || ih >= cd.H) continue;
                    float* dst = dx + (c * cd.H + ih) * cd.W;
                    for (int ow = 0; ow < cd.OW; ++ow) {
                        int iw = ow * cd.stride + kw - cd.pad;
                        if (iw >= 0 && iw < cd.W) dst[iw] += src[oh * cd.OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Tensor x, Tensor w, Tensor b, int stride, int pad) {
    ConvDims cd = conv_dims(x, w, stride, pad);
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id()) || T.wants_grad(w.id()) ||
             (b.defined() && T.wants_grad(b.id()));
    Tensor out = T.alloc({cd.B, cd.O, cd.OH, cd.OW}, g);
    int ck = cd.C * cd.KH * cd.KW;
    int ohw = cd.OH * cd.OW;
    const float* xv = x.data();
    const float* wv = w.data();
    const float* bv = b.defined() ? b.data() : nullptr;
    float* ov = T.mutable_val(out);
#pragma omp parallel
    {
        std::vector<float> cols(static_cast<size_t>(ck) * ohw);
#pragma omp for schedule(static)
        for (int n = 0; n < cd.B; ++n) {
            im2col(xv + static_cast<int64_t>(n) * cd.C * cd.H * cd.W, cd, cols.data());
            MapMC W(wv, cd.O, ck);
            MapMC Cols(cols.data(), ck, ohw);
            MapM Y(ov + static_cast<int64_t>(n) * cd.O * ohw, cd.O, ohw);
            Y.noalias() = W * Cols;
            if (bv)
                for (int o = 0; o < cd.O; ++o) Y.row(o).array() += bv[o];
        }
    }
    if (g) {
        int bi = b.defined() ? b.id() : -1;
        T.set_back(out, [&T, xi = x.id(), wi = w.id(), bi, oi = out.id(), cd, ck, ohw] {
            const float* og = T.node(oi).grad.data();
            const float* xv2 = T.node(xi).val;
            const float* wv2 = T.node(wi).val;
            bool wgx = T.wants_grad(xi);
            bool wgw = T.wants_grad(wi);
            bool wgb = bi >= 0 && T.wants_grad(bi);
            float* gx = wgx ? T.grad_buffer(xi) : nullptr;
            // Per-sample weight/bias partials, reduced serially afterwards.
            std::vector<std::vector<float>> dw_parts;
            std::vector<std::vector<float>> db_parts;
            if (wgw) dw_parts.assign(cd.B, std::vector<float>(static_cast<size_t>(cd.O) * ck));
            if (wgb) db_parts.assign(cd.B, std::vector<float>(cd.O));
#pragma omp parallel
            {
                std::vector<float> cols(static_cast<size_t>(ck) * ohw);
                std::vector<float> dcols(static_cast<size_t>(ck) * ohw);
#pragma omp for schedule(static)
                for (int n = 0; n < cd.B; ++n) {
                    MapMC dY(og + static_cast<int64_t>(n) * cd.O * ohw, cd.O, ohw);
                    if (wgw)
                        im2col(xv2 + static_cast<int64_t>(n) * cd.C * cd.H * cd.W, cd,
                               cols.data());
                    if (wgw) {
                        MapM dW(dw_parts[n].data(), cd.O, ck);
                        MapMC Cols(cols.data(), ck, ohw);
                        dW.noalias() = dY * Cols.transpose();
                    }
                    if (wgb) {
                        for (int o = 0; o < cd.O; ++o) {
                            double s = 0.0;
                            for (int i = 0; i < ohw; ++i) s += dY(o, i);
                            db_parts[n][o] = static_cast<float>(s);
                        }
                    }
                    if (wgx) {
                        MapMC W2(wv2, cd.O, ck);
                        MapM dCols(dcols.data(), ck, ohw);
                        dCols.noalias() = W2.transpose() * dY;
                        col2im_accum(dcols.data(), cd,
                                     gx + static_cast<int64_t>(n) * cd.C * cd.H * cd.W);
                    }
                }
            }
            if (wgw) {
                float* gw = T.grad_buffer(wi);
                for (int n = 0; n < cd.B; ++n)
                    for (int64_t i = 0; i < static_cast<int64_t>(cd.O) * ck; ++i)
                        gw[i] += dw_parts[n][i];
            }
            if (wgb) {
                float* gb = T.grad_buffer(bi);
                for (int n = 0; n < cd.B; ++n)
                    for (int o = 0; o < cd.O; ++o) gb[o] += db_parts[n][o];
            }
        });
    }
    return out;
}

Tensor avg_pool2(Tensor x) {
    const Dims& d = x.dims();
    check(d.size() == 4 && d[2] % 2 == 0 && d[3] % 2 == 0, "avg_pool2: want even [B,C,H,W]");
    int B = d[0], C = d[1], H = d[2], W = d[3];
    int OH = H / 2, OW = W / 2;
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id());
    Tensor out = T.alloc({B, C, OH, OW}, g);
    const float* xv = x.data();
    float* ov = T.mutable_val(out);
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const float* src = xv + bc * H * W;
        float* dst = ov + bc * OH * OW;
        for (int oh = 0; oh < OH; ++oh)
            for (int ow = 0; ow < OW; ++ow)
                dst[oh * OW + ow] = 0.25f * (src[(2 * oh) * W + 2 * ow] +
                                             src[(2 * oh) * W + 2 * ow + 1] +
                                             src[(2 * oh + 1) * W + 2 * ow] +
                                             src[(2 * oh + 1) * W + 2 * ow + 1]);
    }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), oi = out.id(), B, C, H, W, OH, OW] {
            const float* og = T.node(oi).grad.data();
            float* gx = T.grad_buffer(xi);
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
                const float* src = og + bc * OH * OW;
                float* dst = gx + bc * H * W;
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        float v = 0.25f * src[oh * OW + ow];
                        dst[(2 * oh) * W + 2 * ow] += v;
                        dst[(2 * oh) * W + 2 * ow + 1] += v;
                        dst[(2 * oh + 1) * W + 2 * ow] += v;
                        dst[(2 * oh + 1) * W + 2 * ow + 1] += v;
                    }
            }
        });
    }
    return out;
}

Tensor upsample_nearest2(Tensor x) {
    const Dims& d = x.dims();
    check(d.size() == 4, "upsample_nearest2: want [B,C,H,W]");
    int B = d[0], C = d[1], H = d[2], W = d[3];
    int OH = H * 2, OW = W * 2;
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id());
    Tensor out = T.alloc({B, C, OH, OW}, g);
    const float* xv = x.data();
    float* ov = T.mutable_val(out);
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const float* src = xv + bc * H * W;
        float* dst = ov + bc * OH * OW;
        for (int oh = 0; oh < OH; ++oh)
            for (int ow = 0; ow < OW; ++ow)
                dst[oh * OW + ow] = src[(oh / 2) * W + ow / 2];
    }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), oi = out.id(), B, C, H, W, OH, OW] {
            const float* og = T.node(oi).grad.data();
            float* gx = T.grad_buffer(xi);
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
                const float* src = og + bc * OH * OW;
                float* dst = gx + bc * H * W;
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow)
                        dst[(oh / 2) * W + ow / 2] += src[oh * OW + ow];
            }
        });
    }
    return out;
}

Tensor add_channel_bias(Tensor x, Tensor b) {
    const Dims& d = x.dims();
    check(d.size() == 4 && b.size() == d[1], "add_channel_bias: shape mismatch");
    int B = d[0], C = d[1];
    int64_t hw = static_cast<int64_t>(d[2]) * d[3];
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id()) || T.wants_grad(b.id());
    Tensor out = T.alloc(d, g);
    const float* xv = x.data();
    const float* bv = b.data();
    float* ov = T.mutable_val(out);
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) ov[off + i] = xv[off + i] + bv[c];
        }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), bi = b.id(), oi = out.id(), B, C, hw] {
            const float* og = T.node(oi).grad.data();
            if (T.wants_grad(xi)) T.accum_grad(xi, og, static_cast<int64_t>(B) * C * hw);
            if (T.wants_grad(bi)) {
                float* gb = T.grad_buffer(bi);
                for (int n = 0; n < B; ++n)
                    for (int c = 0; c < C; ++c) {
                        int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
                        double s = 0.0;
                        for (int64_t i = 0; i < hw; ++i) s += og[off + i];
                        gb[c] += static_cast<float>(s);
                    }
            }
        });
    }
    return out;
}

Tensor add_sample_channel_bias(Tensor x, Tensor bs) {
    const Dims& d = x.dims();
    const Dims& db = bs.dims();
    check(d.size() == 4 && db.size() == 2 && db[0] == d[0] && db[1] == d[1],
          "add_sample_channel_bias: shape mismatch");
    int B = d[0], C = d[1];
    int64_t hw = static_cast<int64_t>(d[2]) * d[3];
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id()) || T.wants_grad(bs.id());
    Tensor out = T.alloc(d, g);
    const float* xv = x.data();
    const float* bv = bs.data();
    float* ov = T.mutable_val(out);
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
            float bias = bv[n * C + c];
            for (int64_t i = 0; i < hw; ++i) ov[off + i] = xv[off + i] + bias;
        }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), bi = bs.id(), oi = out.id(), B, C, hw] {
            const float* og = T.node(oi).grad.data();
            if (T.wants_grad(xi)) T.accum_grad(xi, og, static_cast<int64_t>(B) * C * hw);
            if (T.wants_grad(bi)) {
                float* gb = T.grad_buffer(bi);
                for (int n = 0; n < B; ++n)
                    for (int c = 0; c < C; ++c) {
                        int64_t off = (static_cast<int64_t>(n) * C + c) * hw;
                        double s = 0.0;
                        for (int64_t i = 0; i < hw; ++i) s += og[off + i];
                        gb[n * C + c] += static_cast<float>(s);
                    }
            }
        });
    }
    return out;
}

Tensor group_norm(Tensor x, int groups, Tensor gamma, Tensor beta) {
    const Dims& d = x.dims();
    check(d.size() == 4, "group_norm: want [B,C,H,W]");
    int B = d[0], C = d[1];
    int64_t hw = static_cast<int64_t>(d[2]) * d[3];
    check(C % groups == 0, "group_norm: C not divisible by groups");
    check(gamma.size() == C && beta.size() == C, "group_norm: affine size mismatch");
    int cg = C / groups;
    int64_t gsize = cg * hw;
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id()) || T.wants_grad(gamma.id()) || T.wants_grad(beta.id());
    Tensor out = T.alloc(d, g);
    const float* xv = x.data();
    const float* gv = gamma.data();
    const float* bv = beta.data();
    float* ov = T.mutable_val(out);
    auto stats = std::make_shared<std::vector<float>>(static_cast<size_t>(B) * groups * 2);
    const float eps = 1e-5f;
    for (int n = 0; n < B; ++n) {
        for (int gi = 0; gi < groups; ++gi) {
            int64_t off = (static_cast<int64_t>(n) * C + gi * cg) * hw;
            double mean = 0.0;
            for (int64_t i = 0; i < gsize; ++i) mean += xv[off + i];
            mean /= gsize;
            double var = 0.0;
            for (int64_t i = 0; i < gsize; ++i) {
                double dv = xv[off + i] - mean;
                var += dv * dv;
            }
            var /= gsize;
            float rstd = static_cast<float>(1.0 / std::sqrt(var + eps));
            float fmean = static_cast<float>(mean);
            (*stats)[(n * groups + gi) * 2] = fmean;
            (*stats)[(n * groups + gi) * 2 + 1] = rstd;
            for (int c = 0; c < cg; ++c) {
                int ch = gi * cg + c;
                int64_t o2 = (static_cast<int64_t>(n) * C + ch) * hw;
                float sc = gv[ch] * rstd;
                float sh = bv[ch] - fmean * sc;
                for (int64_t i = 0; i < hw; ++i) ov[o2 + i] = xv[o2 + i] * sc + sh;
            }
        }
    }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), gi_ = gamma.id(), bi = beta.id(), oi = out.id(),
                         B, C, hw, groups, cg, gsize, stats] {
            const float* og = T.node(oi).grad.data();
            const float* xv2 = T.node(xi).val;
            const float* gv2 = T.node(gi_).val;
            bool wx = T.wants_grad(xi);
            bool wg = T.wants_grad(gi_);
            bool wb = T.wants_grad(bi);
            float* gx = wx ? T.grad_buffer(xi) : nullptr;
            float* gg = wg ? T.grad_buffer(gi_) : nullptr;
            float* gb = wb ? T.grad_buffer(bi) : nullptr;
            for (int n = 0; n < B; ++n) {
                for (int grp = 0; grp < groups; ++grp) {
                    float mean = (*stats)[(n * groups + grp) * 2];
                    float rstd = (*stats)[(n * groups + grp) * 2 + 1];
                    // accumulate dbeta/dgamma and the two reduction terms
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < cg; ++c) {
                        int ch = grp * cg + c;
                        int64_t off = (static_cast<int64_t>(n) * C + ch) * hw;
                        double sdy = 0.0, sdyx = 0.0;
                        for (int64_t i = 0; i < hw; ++i) {
                            float xhat = (xv2[off + i] - mean) * rstd;
                            float dy = og[off + i];
                            sdy += dy;
                            sdyx += static_cast<double>(dy) * xhat;
                        }
                        if (wb) gb[ch] += static_cast<float>(sdy);
                        if (wg) gg[ch] += static_cast<float>(sdyx);
                        sum_dxhat += sdy * gv2[ch];
                        sum_dxhat_xhat += sdyx * gv2[ch];
                    }
                    if (wx) {
                        float m1 = static_cast<float>(sum_dxhat / gsize);
                        float m2 = static_cast<float>(sum_dxhat_xhat / gsize);
                        for (int c = 0; c < cg; ++c) {
                            int ch = grp * cg + c;
                            int64_t off = (static_cast<int64_t>(n) * C + ch) * hw;
                            float gch = gv2[ch];
                            for (int64_t i = 0; i < hw; ++i) {
                                float xhat = (xv2[off + i] - mean) * rstd;
                                gx[off + i] +=
                                    rstd * (og[off + i] * gch - m1 - xhat * m2);
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- reductions ----

Tensor sum_all(Tensor a) {
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id());
    Tensor out = T.alloc({1}, g);
    const float* av = a.data();
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += av[i];
    T.mutable_val(out)[0] = static_cast<float>(s);
    if (g) {
        T.set_back(out, [&T, ai = a.id(), oi = out.id(), n = a.size()] {
            float go = T.node(oi).grad[0];
            float* ga = T.grad_buffer(ai);
            for (int64_t i = 0; i < n; ++i) ga[i] += go;
        });
    }
    return out;
}

Tensor mean_all(Tensor a) {
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id());
    Tensor out = T.alloc({1}, g);
    const float* av = a.data();
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += av[i];
    T.mutable_val(out)[0] = static_cast<float>(s / a.size());
    if (g) {
        T.set_back(out, [&T, ai = a.id(), oi = out.id(), n = a.size()] {
            float go = T.node(oi).grad[0] / static_cast<float>(n);
            float* ga = T.grad_buffer(ai);
            for (int64_t i = 0; i < n; ++i) ga[i] += go;
        });
    }
    return out;
}

Tensor mse(Tensor a, Tensor b) {
    check_same_shape(a, b, "mse");
    Tape& T = *a.tape();
    bool g = T.wants_grad(a.id()) || T.wants_grad(b.id());
    Tensor out = T.alloc({1}, g);
    const float* av = a.data();
    const float* bv = b.data();
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(av[i]) - bv[i];
        s += d * d;
    }
    T.mutable_val(out)[0] = static_cast<float>(s / a.size());
    if (g) {
        T.set_back(out, [&T, ai = a.id(), bi = b.id(), oi = out.id(), n = a.size()] {
            float go = T.node(oi).grad[0] * 2.0f / static_cast<float>(n);
            const float* av2 = T.node(ai).val;
            const float* bv2 = T.node(bi).val;
            if (T.wants_grad(ai)) {
                float* ga = T.grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) ga[i] += go * (av2[i] - bv2[i]);
            }
            if (T.wants_grad(bi)) {
                float* gb = T.grad_buffer(bi);
                for (int64_t i = 0; i < n; ++i) gb[i] -= go * (av2[i] - bv2[i]);
            }
        });
    }
    return out;
}

namespace {

Tensor bce_impl(Tensor logits, Tensor targets, Tensor weights) {
    check_same_shape(logits, targets, "bce_logits");
    if (weights.defined()) check_same_shape(logits, weights, "bce_logits weights");
    Tape& T = *logits.tape();
    bool g = T.wants_grad(logits.id());
    Tensor out = T.alloc({1}, g);
    const float* xv = logits.data();
    const float* tv = targets.data();
    const float* wv = weights.defined() ? weights.data() : nullptr;
    int64_t n = logits.size();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double x = xv[i];
        double t = tv[i];
        double term = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
        s += wv ? wv[i] * term : term;
    }
    T.mutable_val(out)[0] = static_cast<float>(s / n);
    if (g) {
        int wid = weights.defined() ? weights.id() : -1;
        T.set_back(out, [&T, xi = logits.id(), ti = targets.id(), wid, oi = out.id(), n] {
            float go = T.node(oi).grad[0] / static_cast<float>(n);
            const float* xv2 = T.node(xi).val;
            const float* tv2 = T.node(ti).val;
            const float* wv2 = wid >= 0 ? T.node(wid).val : nullptr;
            float* gx = T.grad_buffer(xi);
            for (int64_t i = 0; i < n; ++i) {
                float sgm = 1.0f / (1.0f + std::exp(-xv2[i]));
                float d = (sgm - tv2[i]) * go;
                gx[i] += wv2 ? wv2[i] * d : d;
            }
        });
    }
    return out;
}

}  // namespace

Tensor bce_logits(Tensor logits, Tensor targets) { return bce_impl(logits, targets, {}); }

Tensor bce_logits_weighted(Tensor logits, Tensor targets, Tensor weights) {
    return bce_impl(logits, targets, weights);
}

}  // namespace diffaug
