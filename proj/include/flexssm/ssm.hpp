#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

#include "flexssm/tensor.hpp"

namespace flexssm {

// ------------------------------------------------------------------
// Linear time-invariant machinery (plain doubles; also the oracle side
// of the selective-scan equivalence check)
// ------------------------------------------------------------------

// diagonal continuous-time system: h' = a h + b x, y = c h, step size delta
struct LTISystem {
    std::vector<double> a_diag;
    std::vector<double> b;
    std::vector<double> c;
    double delta = 0.0;
};

struct DiscreteLTI {
    std::vector<double> a_bar;
    std::vector<double> b_bar;
    std::vector<double> c;
};

constexpr double kZohBranchEps = 1e-9; // below this |a| the b_bar formula switches to its limit

// zero-order hold for one diagonal entry: a_bar = exp(delta a),
// b_bar = (exp(delta a) - 1)/a * b, with the a -> 0 limit delta*b
inline std::pair<double, double> zoh_discretize(double a, double b, double delta) {
    if (delta <= 0.0) throw std::invalid_argument("zoh_discretize: delta must be positive");
    const double a_bar = std::exp(delta * a);
    const double b_bar = (std::fabs(a) < kZohBranchEps) ? delta * b : (a_bar - 1.0) / a * b;
    return {a_bar, b_bar};
}

inline DiscreteLTI discretize(const LTISystem& sys) {
    DiscreteLTI d;
    d.c = sys.c;
    d.a_bar.resize(sys.a_diag.size());
    d.b_bar.resize(sys.a_diag.size());
    for (std::size_t n = 0; n < sys.a_diag.size(); ++n) {
        auto [ab, bb] = zoh_discretize(sys.a_diag[n], sys.b[n], sys.delta);
        d.a_bar[n] = ab;
        d.b_bar[n] = bb;
    }
    return d;
}

// h_t = a_bar h_{t-1} + b_bar x_t; y_t = <c, h_t>; h_0 = 0
inline std::vector<double> ssm_recurrence(const DiscreteLTI& sys, const std::vector<double>& x) {
    if (x.empty()) throw std::invalid_argument("ssm_recurrence: empty sequence");
    const std::size_t n_state = sys.a_bar.size();
    std::vector<double> h(n_state, 0.0);
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t t = 0; t < x.size(); ++t) {
        double acc = 0.0;
        for (std::size_t n = 0; n < n_state; ++n) {
            h[n] = sys.a_bar[n] * h[n] + sys.b_bar[n] * x[t];
            acc += sys.c[n] * h[n];
        }
        y[t] = acc;
    }
    return y;
}

// K[t] = sum_n c_n a_bar_n^t b_bar_n
inline std::vector<double> ssm_conv_kernel(const DiscreteLTI& sys, std::int64_t len) {
    if (len < 1) throw std::invalid_argument("ssm_conv_kernel: length must be >= 1");
    const std::size_t n_state = sys.a_bar.size();
    std::vector<double> pow_a(sys.b_bar);
    std::vector<double> k(std::size_t(len), 0.0);
    for (std::int64_t t = 0; t < len; ++t) {
        double acc = 0.0;
        for (std::size_t n = 0; n < n_state; ++n) {
            acc += sys.c[n] * pow_a[n];
            pow_a[n] *= sys.a_bar[n];
        }
        k[std::size_t(t)] = acc;
    }
    return k;
}

// causal convolution with zero left padding; a kernel longer than the
// sequence is truncated
inline std::vector<double> ssm_conv_apply(const std::vector<double>& kernel, const std::vector<double>& x) {
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t t = 0; t < x.size(); ++t) {
        const std::size_t taps = std::min(kernel.size(), t + 1);
        double acc = 0.0;
        for (std::size_t tau = 0; tau < taps; ++tau) acc += kernel[tau] * x[t - tau];
        y[t] = acc;
    }
    return y;
}

// ------------------------------------------------------------------
// Selective (input-dependent) scan as a differentiable tape op
// ------------------------------------------------------------------

// u: (L, Di), delta: (L, Di) positive, b_seq/c_seq: (L, N), a: (Di, N)
// negative, d_skip: (Di). Per channel d and state n:
//   a_bar = exp(delta_t[d] a[d,n])
//   b_bar = (a_bar - 1)/a[d,n]          (delta_t[d] once |a| < 1e-9)
//   h_t   = a_bar h_{t-1} + b_bar B_t[n] u_t[d]
//   y_t[d] = sum_n C_t[n] h_t[d,n] + d_skip[d] u_t[d]
// Sequential in t; cost is linear in L. All hidden states and decay factors
// are stashed for the reverse pass, which runs the recurrence backwards.
template <typename S>
Tensor<S> selective_scan_core(Tensor<S> u, Tensor<S> delta, Tensor<S> b_seq, Tensor<S> c_seq, Tensor<S> a,
                              Tensor<S> d_skip) {
    const Shape &su = u.shape(), &sb = b_seq.shape(), &sa = a.shape();
    if (su.size() != 2 || su != delta.shape())
        throw std::invalid_argument("selective_scan: shape mismatch " + shape_str(su) + " vs " + shape_str(delta.shape()));
    if (sb.size() != 2 || sb != c_seq.shape() || sb[0] != su[0])
        throw std::invalid_argument("selective_scan: shape mismatch " + shape_str(sb) + " vs " + shape_str(c_seq.shape()));
    if (sa.size() != 2 || sa[0] != su[1] || sa[1] != sb[1] || d_skip.numel() != su[1])
        throw std::invalid_argument("selective_scan: shape mismatch " + shape_str(sa) + " vs " + shape_str(su));
    const std::int64_t L = su[0], Di = su[1], N = sa[1];
    if (L < 1) throw std::invalid_argument("selective_scan: empty sequence");

    const S* pu = u.value().data();
    const S* pd = delta.value().data();
    const S* pb = b_seq.value().data();
    const S* pc = c_seq.value().data();
    const S* pa = a.value().data();
    const S* pskip = d_skip.value().data();

    auto h_all = std::make_shared<std::vector<S>>(std::size_t(L * Di * N));
    auto abar_all = std::make_shared<std::vector<S>>(std::size_t(L * Di * N));
    std::vector<S> y(std::size_t(L * Di));

    for (std::int64_t t = 0; t < L; ++t) {
        for (std::int64_t d = 0; d < Di; ++d) {
            const S dt = pd[t * Di + d];
            const S ut = pu[t * Di + d];
            S acc = 0;
            for (std::int64_t n = 0; n < N; ++n) {
                const S an = pa[d * N + n];
                const S abar = std::exp(dt * an);
                const S bbar = (std::fabs(double(an)) < kZohBranchEps) ? dt : (abar - S(1)) / an;
                const S prev = (t == 0) ? S(0) : (*h_all)[std::size_t(((t - 1) * Di + d) * N + n)];
                const S h = abar * prev + bbar * pb[t * N + n] * ut;
                (*h_all)[std::size_t((t * Di + d) * N + n)] = h;
                (*abar_all)[std::size_t((t * Di + d) * N + n)] = abar;
                acc += pc[t * N + n] * h;
            }
            y[std::size_t(t * Di + d)] = acc + pskip[d] * ut;
        }
    }
    u.tape->count_ops(std::uint64_t(L * Di * N) * 6);

    const std::int64_t uid = u.id, did = delta.id, bid = b_seq.id, cid = c_seq.id, aid = a.id, sid = d_skip.id;
    auto bw = [=](Tape<S>& t, std::int64_t self) {
        const S* gy = t.grad(self).data();
        const S* vu = t.value(uid).data();
        const S* vd = t.value(did).data();
        const S* vb = t.value(bid).data();
        const S* vc = t.value(cid).data();
        const S* va = t.value(aid).data();
        const S* vskip = t.value(sid).data();
        const bool need_u = t.requires_grad(uid), need_d = t.requires_grad(did), need_b = t.requires_grad(bid),
                   need_c = t.requires_grad(cid), need_a = t.requires_grad(aid), need_s = t.requires_grad(sid);
        S* gu = need_u ? t.grad_buffer(uid).data() : nullptr;
        S* gd = need_d ? t.grad_buffer(did).data() : nullptr;
        S* gb = need_b ? t.grad_buffer(bid).data() : nullptr;
        S* gc = need_c ? t.grad_buffer(cid).data() : nullptr;
        S* ga = need_a ? t.grad_buffer(aid).data() : nullptr;
        S* gs = need_s ? t.grad_buffer(sid).data() : nullptr;

        std::vector<S> carry(std::size_t(Di * N), S(0)); // abar_{t+1} * gh_{t+1}
        for (std::int64_t tt = L - 1; tt >= 0; --tt) {
            for (std::int64_t d = 0; d < Di; ++d) {
                const S g = gy[tt * Di + d];
                const S ut = vu[tt * Di + d];
                const S dt = vd[tt * Di + d];
                if (need_s) gs[d] += g * ut;
                S gu_acc = need_u ? g * vskip[d] : S(0);
                S gd_acc = 0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const std::size_t idx = std::size_t((tt * Di + d) * N + n);
                    const S an = va[d * N + n];
                    const S abar = (*abar_all)[idx];
                    const bool small = std::fabs(double(an)) < kZohBranchEps;
                    const S bbar = small ? dt : (abar - S(1)) / an;
                    const S gh = g * vc[tt * N + n] + carry[std::size_t(d * N + n)];
                    const S hprev = (tt == 0) ? S(0) : (*h_all)[std::size_t(((tt - 1) * Di + d) * N + n)];
                    const S bt = vb[tt * N + n];
                    if (need_c) gc[tt * N + n] += g * (*h_all)[idx];
                    if (need_b) gb[tt * N + n] += gh * bbar * ut;
                    if (need_u) gu_acc += gh * bbar * bt;
                    if (need_d) {
                        const S dbd_delta = small ? S(1) : abar; // d b_bar / d delta
                        gd_acc += gh * (hprev * an * abar + dbd_delta * bt * ut);
                    }
                    if (need_a) {
                        const S dbd_a = small ? dt * dt / S(2) : (dt * abar * an - (abar - S(1))) / (an * an);
                        ga[d * N + n] += gh * (hprev * dt * abar + dbd_a * bt * ut);
                    }
                    carry[std::size_t(d * N + n)] = abar * gh;
                }
                if (need_u) gu[tt * Di + d] += gu_acc;
                if (need_d) gd[tt * Di + d] += gd_acc;
            }
        }
    };
    return u.tape->record({L, Di}, std::move(y), {uid, did, bid, cid, aid, sid}, std::move(bw), "selective_scan");
}

// one direction's scan parameters, already bound to a tape
template <typename S>
struct ScanParamTensors {
    Tensor<S> a_log;   // (Di, N); A = -exp(a_log)
    Tensor<S> conv_w;  // (Di, k) depthwise causal kernel
    Tensor<S> delta_w; // (Di, Di)
    Tensor<S> delta_b; // (Di)
    Tensor<S> b_w;     // (Di, N)
    Tensor<S> c_w;     // (Di, N)
    Tensor<S> d_skip;  // (Di)
};

// input-dependent parameterization: delta_t = softplus(delta_proj(x_t)),
// B_t = b_proj(x_t), C_t = c_proj(x_t)
template <typename S>
Tensor<S> selective_scan(Tensor<S> x, const ScanParamTensors<S>& p) {
    auto delta = softplus(add(matmul(x, p.delta_w), p.delta_b));
    auto b_seq = matmul(x, p.b_w);
    auto c_seq = matmul(x, p.c_w);
    auto a = scale(exp_op(p.a_log), -1.0);
    return selective_scan_core(x, delta, b_seq, c_seq, a, p.d_skip);
}

template <typename S>
struct MambaBlockTensors {
    Tensor<S> in_w;  // (D, 2*Di)
    Tensor<S> out_w; // (Di, D)
    ScanParamTensors<S> fwd;
    ScanParamTensors<S> bwd; // used when bidirectional
    bool bidirectional = true;
};

// u, z = split(in_proj(x)); u <- SiLU(causal depthwise conv(u)); scan; gate by
// SiLU(z); project out. The bidirectional path runs an independent conv+scan on
// the reversed sequence and adds it (reversed back) before the output
// projection. Residual and pre-norm belong to the caller.
template <typename S>
Tensor<S> mamba_block(Tensor<S> x, const MambaBlockTensors<S>& blk) {
    const std::int64_t di = blk.in_w.shape()[1] / 2;
    auto xz = matmul(x, blk.in_w);
    auto u0 = slice(xz, 1, 0, di);
    auto z = slice(xz, 1, di, 2 * di);
    auto s = selective_scan(silu(dwconv_causal(u0, blk.fwd.conv_w)), blk.fwd);
    if (blk.bidirectional) {
        auto ur = reverse_rows(u0);
        auto sb = selective_scan(silu(dwconv_causal(ur, blk.bwd.conv_w)), blk.bwd);
        s = add(s, reverse_rows(sb));
    }
    return matmul(mul(s, silu(z)), blk.out_w);
}

} // namespace flexssm
