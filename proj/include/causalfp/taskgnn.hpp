#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/rng.hpp"
#include "causalfp/sysid.hpp"

namespace causalfp::gnn {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Per-recording classification sample: nodes are state channels, node
// features are the rows of [Q A B], edges carry the normalized |A| weights
// with forced self-loops.
struct TaskGraph {
    Eigen::MatrixXd node_features;  // m x (2m+n)
    Eigen::MatrixXd edge_weights;   // m x m in [0,1], diagonal 1
    int label = 0;
    std::string subject_id;

    Eigen::Index nodes() const { return node_features.rows(); }
    Eigen::Index feature_dim() const { return node_features.cols(); }
};

inline TaskGraph build_graph(const CausalSignature& sig, int label, const std::string& subject_id = {}) {
    TaskGraph g;
    g.node_features = sig.stacked();
    g.edge_weights = sig.A.cwiseAbs();
    const double maxw = g.edge_weights.maxCoeff();
    if (maxw > 0.0) g.edge_weights /= maxw;
    g.edge_weights.diagonal().setOnes();
    g.label = label;
    g.subject_id = subject_id;
    return g;
}

struct GnnConfig {
    Eigen::Index in_dim = 0;
    int hidden = 32;
    int heads = 2;
    double pool_ratio = 0.5;
    int classes = 2;

    Eigen::Index width() const { return static_cast<Eigen::Index>(hidden) * heads; }
};

template <typename S>
struct GatHeadParams {
    MatX<S> W;       // in_dim x hidden
    MatX<S> a_self;  // hidden x 1, weighs the aggregating node's projection
    MatX<S> a_nbr;   // hidden x 1, weighs the in-neighbor's projection
};

template <typename S>
struct GnnParams {
    GnnConfig cfg;
    std::vector<GatHeadParams<S>> gat1;
    MatX<S> skip1;  // in_dim x width
    std::vector<GatHeadParams<S>> gat2;
    MatX<S> skip2;   // width x width
    MatX<S> pool_p;  // width x 1
    MatX<S> v2_Wl;   // width x width, left half of the pair projection
    MatX<S> v2_Wr;   // width x width, right half (also the value map)
    MatX<S> v2_a;    // width x 1
    MatX<S> head_W;  // width x classes
    MatX<S> head_b;  // classes x 1

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        for (std::size_t k = 0; k < gat1.size(); ++k) {
            fn("gat1." + std::to_string(k) + ".W", gat1[k].W);
            fn("gat1." + std::to_string(k) + ".a_self", gat1[k].a_self);
            fn("gat1." + std::to_string(k) + ".a_nbr", gat1[k].a_nbr);
        }
        fn("skip1", skip1);
        for (std::size_t k = 0; k < gat2.size(); ++k) {
            fn("gat2." + std::to_string(k) + ".W", gat2[k].W);
            fn("gat2." + std::to_string(k) + ".a_self", gat2[k].a_self);
            fn("gat2." + std::to_string(k) + ".a_nbr", gat2[k].a_nbr);
        }
        fn("skip2", skip2);
        fn("pool.p", pool_p);
        fn("gatv2.Wl", v2_Wl);
        fn("gatv2.Wr", v2_Wr);
        fn("gatv2.a", v2_a);
        fn("head.W", head_W);
        fn("head.b", head_b);
    }

    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        const_cast<GnnParams<S>*>(this)->for_each_tensor(
            [&](const std::string& name, MatX<S>& t) { fn(name, static_cast<const MatX<S>&>(t)); });
    }
};

// Uniform(-s, s) with s = 1/sqrt(fan_in) per tensor, drawn in a fixed order.
template <typename S>
GnnParams<S> init_params(const GnnConfig& cfg, std::uint64_t seed) {
    if (cfg.in_dim < 1 || cfg.hidden < 1 || cfg.heads < 1 || cfg.classes < 2)
        throw ValidationError("inconsistent network configuration");
    if (!(cfg.pool_ratio > 0.0 && cfg.pool_ratio <= 1.0)) throw ValidationError("pool_ratio must be in (0, 1]");
    Rng rng(seed);
    auto fill = [&](MatX<S>& M, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        M.resize(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = static_cast<S>(rng.uniform(-s, s));
    };
    GnnParams<S> p;
    p.cfg = cfg;
    const Eigen::Index w = cfg.width();
    p.gat1.resize(static_cast<std::size_t>(cfg.heads));
    for (auto& h : p.gat1) {
        fill(h.W, cfg.in_dim, cfg.hidden, cfg.in_dim);
        fill(h.a_self, cfg.hidden, 1, cfg.hidden);
        fill(h.a_nbr, cfg.hidden, 1, cfg.hidden);
    }
    fill(p.skip1, cfg.in_dim, w, cfg.in_dim);
    p.gat2.resize(static_cast<std::size_t>(cfg.heads));
    for (auto& h : p.gat2) {
        fill(h.W, w, cfg.hidden, w);
        fill(h.a_self, cfg.hidden, 1, cfg.hidden);
        fill(h.a_nbr, cfg.hidden, 1, cfg.hidden);
    }
    fill(p.skip2, w, w, w);
    fill(p.pool_p, w, 1, w);
    fill(p.v2_Wl, w, w, w);
    fill(p.v2_Wr, w, w, w);
    fill(p.v2_a, w, 1, w);
    fill(p.head_W, w, cfg.classes, w);
    fill(p.head_b, cfg.classes, 1, w);
    return p;
}

template <typename S>
GnnParams<S> zero_like(const GnnParams<S>& p) {
    GnnParams<S> z = p;
    z.for_each_tensor([](const std::string&, MatX<S>& t) { t.setZero(); });
    return z;
}

namespace detail {

template <typename S>
S leaky(S x) {
    return x > S(0) ? x : S(0.2) * x;
}
template <typename S>
S leaky_grad(S x) {
    return x > S(0) ? S(1) : S(0.2);
}
template <typename S>
S elu(S x) {
    return x > S(0) ? x : std::expm1(x);
}
template <typename S>
S elu_grad(S x) {
    return x > S(0) ? S(1) : std::exp(x);
}

}  // namespace detail

// Caches for one attention stage; enough to replay the exact backward pass.
template <typename S>
struct AttentionTrace {
    MatX<S> Z;            // projected features (GAT) or value rows R (GATv2)
    MatX<S> logits;       // pre-LeakyReLU pair logits (GAT); post for GATv2
    MatX<S> alpha;        // masked row softmax
    MatX<S> alpha_tilde;  // edge-weight reweighted, rows sum to 1
    MatX<S> agg;          // pre-ELU aggregate
};

template <typename S>
struct GatLayerTrace {
    std::vector<AttentionTrace<S>> heads;
};

namespace detail {

// Masked row softmax followed by edge-weight reweighting:
// alpha = softmax_j(logits), alpha_tilde = alpha.*w / rowsum(alpha.*w).
// Every node has its self-loop, so rows never normalize over an empty set.
template <typename S>
void attention_rows(const MatX<S>& logits, const Eigen::MatrixXd& w, MatX<S>& alpha, MatX<S>& alpha_tilde) {
    const Eigen::Index N = logits.rows();
    alpha.setZero(N, N);
    alpha_tilde.setZero(N, N);
    for (Eigen::Index i = 0; i < N; ++i) {
        S mx = std::numeric_limits<S>::lowest();
        for (Eigen::Index j = 0; j < N; ++j)
            if (w(i, j) > 0.0 && logits(i, j) > mx) mx = logits(i, j);
        S denom = S(0);
        for (Eigen::Index j = 0; j < N; ++j)
            if (w(i, j) > 0.0) {
                alpha(i, j) = std::exp(logits(i, j) - mx);
                denom += alpha(i, j);
            }
        S rho = S(0);
        for (Eigen::Index j = 0; j < N; ++j) {
            alpha(i, j) /= denom;
            alpha_tilde(i, j) = alpha(i, j) * static_cast<S>(w(i, j));
            rho += alpha_tilde(i, j);
        }
        for (Eigen::Index j = 0; j < N; ++j) alpha_tilde(i, j) /= rho;
    }
}

// Shared backward through alpha_tilde -> alpha -> masked softmax. Consumes
// d(alpha_tilde), emits d(logits).
template <typename S>
MatX<S> attention_rows_backward(const MatX<S>& d_alpha_tilde, const MatX<S>& alpha, const MatX<S>& alpha_tilde,
                                const Eigen::MatrixXd& w) {
    const Eigen::Index N = alpha.rows();
    MatX<S> d_logits = MatX<S>::Zero(N, N);
    for (Eigen::Index i = 0; i < N; ++i) {
        // alpha_tilde_ij = alpha_ij w_ij / rho_i with rho_i = sum_l alpha_il w_il.
        S dot_t = S(0);
        for (Eigen::Index j = 0; j < N; ++j) dot_t += d_alpha_tilde(i, j) * alpha_tilde(i, j);
        // rho_i in terms of the cached tensors: alpha_tilde = alpha.*w/rho.
        S rho = S(0);
        for (Eigen::Index j = 0; j < N; ++j)
            if (w(i, j) > 0.0) rho += alpha(i, j) * static_cast<S>(w(i, j));
        // d alpha_ij = (d alpha_tilde_ij - dot_t) * w_ij / rho
        // then softmax backward: d logit_ij = alpha_ij (d alpha_ij - sum_l d alpha_il alpha_il)
        S dot_a = S(0);
        std::vector<S> d_alpha(static_cast<std::size_t>(N), S(0));
        for (Eigen::Index j = 0; j < N; ++j) {
            if (w(i, j) <= 0.0) continue;
            d_alpha[static_cast<std::size_t>(j)] = (d_alpha_tilde(i, j) - dot_t) * static_cast<S>(w(i, j)) / rho;
            dot_a += d_alpha[static_cast<std::size_t>(j)] * alpha(i, j);
        }
        for (Eigen::Index j = 0; j < N; ++j)
            if (w(i, j) > 0.0) d_logits(i, j) = alpha(i, j) * (d_alpha[static_cast<std::size_t>(j)] - dot_a);
    }
    return d_logits;
}

}  // namespace detail

// One multi-head GAT stage with a linear skip connection. Attention logits
// are LeakyReLU(a_self.z_i + a_nbr.z_j) over the in-neighborhood of i; the
// softmax weights are reweighted by the causal edge strengths and
// renormalized, so attention rows stay stochastic.
template <typename S>
MatX<S> gat_forward(const MatX<S>& Hin, const std::vector<GatHeadParams<S>>& heads, const MatX<S>& skip_W,
                    const Eigen::MatrixXd& edge_weights, GatLayerTrace<S>* trace = nullptr) {
    const Eigen::Index N = Hin.rows();
    if (edge_weights.rows() != N || edge_weights.cols() != N)
        throw ValidationError("edge weight matrix does not match node count");
    const Eigen::Index h = heads.empty() ? 0 : heads.front().W.cols();
    MatX<S> out(N, static_cast<Eigen::Index>(heads.size()) * h);
    if (trace) trace->heads.assign(heads.size(), {});
    for (std::size_t k = 0; k < heads.size(); ++k) {
        const auto& head = heads[k];
        const MatX<S> Z = Hin * head.W;
        const VecX<S> s_self = Z * head.a_self;
        const VecX<S> s_nbr = Z * head.a_nbr;
        MatX<S> logits(N, N);
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < N; ++j)
                logits(i, j) = edge_weights(i, j) > 0.0 ? detail::leaky(s_self(i) + s_nbr(j)) : S(0);
        MatX<S> alpha, alpha_tilde;
        detail::attention_rows(logits, edge_weights, alpha, alpha_tilde);
        const MatX<S> agg = alpha_tilde * Z;
        out.middleCols(static_cast<Eigen::Index>(k) * h, h) = agg.unaryExpr([](S x) { return detail::elu(x); });
        if (trace) {
            auto& t = trace->heads[k];
            // cache the pre-activation pair sums, not the LeakyReLU output
            for (Eigen::Index i = 0; i < N; ++i)
                for (Eigen::Index j = 0; j < N; ++j) logits(i, j) = s_self(i) + s_nbr(j);
            t.Z = Z;
            t.logits = std::move(logits);
            t.alpha = std::move(alpha);
            t.alpha_tilde = std::move(alpha_tilde);
            t.agg = agg;
        }
    }
    out += Hin * skip_W;
    return out;
}

// Backward companion of gat_forward. Accumulates parameter gradients and
// returns the gradient with respect to Hin.
template <typename S>
MatX<S> gat_backward(const MatX<S>& Hin, const std::vector<GatHeadParams<S>>& heads, const MatX<S>& skip_W,
                     const Eigen::MatrixXd& edge_weights, const GatLayerTrace<S>& trace, const MatX<S>& d_out,
                     std::vector<GatHeadParams<S>>& d_heads, MatX<S>& d_skip_W) {
    const Eigen::Index N = Hin.rows();
    const Eigen::Index h = heads.empty() ? 0 : heads.front().W.cols();
    MatX<S> d_Hin = d_out * skip_W.transpose();
    d_skip_W += Hin.transpose() * d_out;
    for (std::size_t k = 0; k < heads.size(); ++k) {
        const auto& t = trace.heads[k];
        const auto& head = heads[k];
        const MatX<S> d_head_out = d_out.middleCols(static_cast<Eigen::Index>(k) * h, h);
        MatX<S> d_agg(N, h);
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index c = 0; c < h; ++c)
                d_agg(i, c) = d_head_out(i, c) * detail::elu_grad(t.agg(i, c));
        // agg = alpha_tilde * Z
        MatX<S> d_alpha_tilde = MatX<S>::Zero(N, N);
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < N; ++j)
                if (edge_weights(i, j) > 0.0) d_alpha_tilde(i, j) = d_agg.row(i).dot(t.Z.row(j));
        MatX<S> d_Z = t.alpha_tilde.transpose() * d_agg;
        const MatX<S> d_pair = detail::attention_rows_backward(d_alpha_tilde, t.alpha, t.alpha_tilde, edge_weights);
        // logits cached pre-activation: e_ij = leaky(s_self_i + s_nbr_j)
        VecX<S> d_s_self = VecX<S>::Zero(N);
        VecX<S> d_s_nbr = VecX<S>::Zero(N);
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index j = 0; j < N; ++j) {
                if (edge_weights(i, j) <= 0.0) continue;
                const S g = d_pair(i, j) * detail::leaky_grad(t.logits(i, j));
                d_s_self(i) += g;
                d_s_nbr(j) += g;
            }
        d_Z += d_s_self * head.a_self.transpose() + d_s_nbr * head.a_nbr.transpose();
        d_heads[k].a_self += t.Z.transpose() * d_s_self;
        d_heads[k].a_nbr += t.Z.transpose() * d_s_nbr;
        d_heads[k].W += Hin.transpose() * d_Z;
        d_Hin += d_Z * head.W.transpose();
    }
    return d_Hin;
}

// GATv2 stage, single head: e_ij = a . LeakyReLU(Wl h_i + Wr h_j); the value
// passed along an edge is Wr h_j.
template <typename S>
MatX<S> gatv2_forward(const MatX<S>& Hin, const MatX<S>& Wl, const MatX<S>& Wr, const MatX<S>& a,
                      const Eigen::MatrixXd& edge_weights, AttentionTrace<S>* trace = nullptr,
                      MatX<S>* L_out = nullptr) {
    const Eigen::Index N = Hin.rows();
    if (edge_weights.rows() != N || edge_weights.cols() != N)
        throw ValidationError("edge weight matrix does not match node count");
    const MatX<S> L = Hin * Wl;
    const MatX<S> R = Hin * Wr;
    const Eigen::Index h = L.cols();
    MatX<S> logits = MatX<S>::Zero(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
            if (edge_weights(i, j) <= 0.0) continue;
            S e = S(0);
            for (Eigen::Index c = 0; c < h; ++c) e += a(c, 0) * detail::leaky(L(i, c) + R(j, c));
            logits(i, j) = e;
        }
    MatX<S> alpha, alpha_tilde;
    detail::attention_rows(logits, edge_weights, alpha, alpha_tilde);
    const MatX<S> agg = alpha_tilde * R;
    MatX<S> out = agg.unaryExpr([](S x) { return detail::elu(x); });
    if (trace) {
        trace->Z = R;
        trace->logits = std::move(logits);
        trace->alpha = std::move(alpha);
        trace->alpha_tilde = std::move(alpha_tilde);
        trace->agg = agg;
    }
    if (L_out) *L_out = L;
    return out;
}

template <typename S>
MatX<S> gatv2_backward(const MatX<S>& Hin, const MatX<S>& Wl, const MatX<S>& Wr, const MatX<S>& a,
                       const Eigen::MatrixXd& edge_weights, const AttentionTrace<S>& trace, const MatX<S>& L,
                       const MatX<S>& d_out, MatX<S>& d_Wl, MatX<S>& d_Wr, MatX<S>& d_a) {
    const Eigen::Index N = Hin.rows();
    const Eigen::Index h = L.cols();
    const MatX<S>& R = trace.Z;
    MatX<S> d_agg(N, h);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index c = 0; c < h; ++c) d_agg(i, c) = d_out(i, c) * detail::elu_grad(trace.agg(i, c));
    MatX<S> d_alpha_tilde = MatX<S>::Zero(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j)
            if (edge_weights(i, j) > 0.0) d_alpha_tilde(i, j) = d_agg.row(i).dot(R.row(j));
    MatX<S> d_R = trace.alpha_tilde.transpose() * d_agg;
    const MatX<S> d_e = detail::attention_rows_backward(d_alpha_tilde, trace.alpha, trace.alpha_tilde, edge_weights);
    MatX<S> d_L = MatX<S>::Zero(N, h);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
            if (edge_weights(i, j) <= 0.0 || d_e(i, j) == S(0)) continue;
            for (Eigen::Index c = 0; c < h; ++c) {
                const S pre = L(i, c) + R(j, c);
                const S dk = d_e(i, j) * a(c, 0) * detail::leaky_grad(pre);
                d_a(c, 0) += d_e(i, j) * detail::leaky(pre);
                d_L(i, c) += dk;
                d_R(j, c) += dk;
            }
        }
    d_Wl += Hin.transpose() * d_L;
    d_Wr += Hin.transpose() * d_R;
    return d_L * Wl.transpose() + d_R * Wr.transpose();
}

struct PoolSelection {
    std::vector<Eigen::Index> kept;  // original node indices, score-descending
};

// Score-based pruning: y = Hin p/|p|, keep the ceil(ratio N) best nodes and
// gate their features by tanh(y). Edges restrict to the kept nodes with the
// self-loop diagonal re-forced.
template <typename S>
std::tuple<MatX<S>, Eigen::MatrixXd, PoolSelection> topk_pool(const MatX<S>& Hin, const MatX<S>& p,
                                                              const Eigen::MatrixXd& edge_weights, double ratio,
                                                              VecX<S>* scores_out = nullptr) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("pool ratio must be in (0, 1]");
    const S pnorm = p.norm();
    if (!(pnorm > S(0))) throw ValidationError("degenerate pool scorer (zero vector)");
    const Eigen::Index N = Hin.rows();
    const VecX<S> y = (Hin * p) / pnorm;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return y(a) > y(b); });
    const Eigen::Index k = static_cast<Eigen::Index>(std::ceil(ratio * static_cast<double>(N)));
    PoolSelection sel;
    sel.kept.assign(order.begin(), order.begin() + k);

    MatX<S> Hout(k, Hin.cols());
    Eigen::MatrixXd edge_out(k, k);
    for (Eigen::Index r = 0; r < k; ++r) {
        const Eigen::Index o = sel.kept[static_cast<std::size_t>(r)];
        Hout.row(r) = Hin.row(o) * std::tanh(y(o));
        for (Eigen::Index c = 0; c < k; ++c) edge_out(r, c) = edge_weights(o, sel.kept[static_cast<std::size_t>(c)]);
    }
    edge_out.diagonal().setOnes();
    if (scores_out) *scores_out = y;
    return {std::move(Hout), std::move(edge_out), std::move(sel)};
}

template <typename S>
MatX<S> topk_pool_backward(const MatX<S>& Hin, const MatX<S>& p, const VecX<S>& y, const PoolSelection& sel,
                           const MatX<S>& d_Hout, MatX<S>& d_p) {
    const S pnorm = p.norm();
    MatX<S> d_Hin = MatX<S>::Zero(Hin.rows(), Hin.cols());
    VecX<S> d_y = VecX<S>::Zero(Hin.rows());
    for (Eigen::Index r = 0; r < d_Hout.rows(); ++r) {
        const Eigen::Index o = sel.kept[static_cast<std::size_t>(r)];
        const S g = std::tanh(y(o));
        d_Hin.row(o) += d_Hout.row(r) * g;
        d_y(o) = d_Hout.row(r).dot(Hin.row(o)) * (S(1) - g * g);
    }
    // y = Hin p / |p|: route through both Hin and the normalized scorer.
    const MatX<S> p_hat = p / pnorm;
    d_Hin += d_y * p_hat.transpose();
    const MatX<S> d_p_hat = Hin.transpose() * d_y;
    d_p += (d_p_hat - p_hat * (p_hat.transpose() * d_p_hat)(0, 0)) / pnorm;
    return d_Hin;
}

// Global mean readout into class logits.
template <typename S>
VecX<S> readout_and_classify(const MatX<S>& Hin, const MatX<S>& head_W, const MatX<S>& head_b,
                             VecX<S>* mean_out = nullptr) {
    if (Hin.rows() < 1) throw ValidationError("readout needs at least one node");
    const VecX<S> mean = Hin.colwise().mean().transpose();
    if (mean_out) *mean_out = mean;
    return head_W.transpose() * mean + head_b.col(0);
}

template <typename S>
struct ForwardTrace {
    MatX<S> h0;  // casted input features
    GatLayerTrace<S> gat1;
    MatX<S> h1;
    GatLayerTrace<S> gat2;
    MatX<S> h2;
    VecX<S> pool_scores;
    PoolSelection pool_sel;
    Eigen::MatrixXd pooled_edges;
    MatX<S> h3;
    AttentionTrace<S> v2;
    MatX<S> v2_L;
    MatX<S> h4;
    VecX<S> mean;
    VecX<S> logits;
};

// Full pipeline: GAT(+skip) -> GAT(+skip) -> TopK pool -> GATv2 ->
// global mean pool -> linear head.
template <typename S>
VecX<S> forward_graph(const GnnParams<S>& params, const TaskGraph& graph, ForwardTrace<S>* trace = nullptr) {
    if (graph.feature_dim() != params.cfg.in_dim)
        throw ValidationError("graph feature dimension does not match the network input size");
    ForwardTrace<S> local;
    ForwardTrace<S>& t = trace ? *trace : local;
    t.h0 = graph.node_features.template cast<S>();
    t.h1 = gat_forward(t.h0, params.gat1, params.skip1, graph.edge_weights, trace ? &t.gat1 : nullptr);
    t.h2 = gat_forward(t.h1, params.gat2, params.skip2, graph.edge_weights, trace ? &t.gat2 : nullptr);
    auto [h3, pooled_edges, sel] = topk_pool(t.h2, params.pool_p, graph.edge_weights, params.cfg.pool_ratio,
                                             trace ? &t.pool_scores : nullptr);
    t.h3 = std::move(h3);
    t.pooled_edges = std::move(pooled_edges);
    t.pool_sel = std::move(sel);
    t.h4 = gatv2_forward(t.h3, params.v2_Wl, params.v2_Wr, params.v2_a, t.pooled_edges,
                         trace ? &t.v2 : nullptr, trace ? &t.v2_L : nullptr);
    t.logits = readout_and_classify(t.h4, params.head_W, params.head_b, trace ? &t.mean : nullptr);
    return t.logits;
}

template <typename S>
S cross_entropy(const VecX<S>& logits, int label, VecX<S>* d_logits = nullptr) {
    const S mx = logits.maxCoeff();
    const VecX<S> shifted = (logits.array() - mx).matrix();
    const VecX<S> ex = shifted.array().exp().matrix();
    const S denom = ex.sum();
    const S loss = std::log(denom) - shifted(label);
    if (d_logits) {
        *d_logits = ex / denom;
        (*d_logits)(label) -= S(1);
    }
    return loss;
}

// Mean cross-entropy over the batch with exact reverse-mode gradients for
// every tensor. The hard top-k selection is piecewise constant; gradients
// flow through the gating and the kept features.
template <typename S>
std::pair<S, GnnParams<S>> loss_and_gradients(const GnnParams<S>& params, const std::vector<TaskGraph>& batch) {
    if (batch.empty()) throw ValidationError("loss_and_gradients: empty batch");
    GnnParams<S> grads = zero_like(params);
    S total = S(0);
    const S scale = S(1) / static_cast<S>(batch.size());
    for (const auto& graph : batch) {
        if (graph.label < 0 || graph.label >= params.cfg.classes)
            throw ValidationError("graph label out of range for subject " + graph.subject_id);
        ForwardTrace<S> t;
        forward_graph(params, graph, &t);
        VecX<S> d_logits;
        const S loss = cross_entropy(t.logits, graph.label, &d_logits);
        if (!std::isfinite(static_cast<double>(loss)))
            throw NumericalError("non-finite loss on graph (subject " + graph.subject_id + ")");
        total += loss * scale;
        d_logits *= scale;

        // head + mean pool
        grads.head_W += t.mean * d_logits.transpose();
        grads.head_b.col(0) += d_logits;
        const VecX<S> d_mean = params.head_W * d_logits;
        MatX<S> d_h4(t.h4.rows(), t.h4.cols());
        const S inv_nodes = S(1) / static_cast<S>(t.h4.rows());
        for (Eigen::Index r = 0; r < t.h4.rows(); ++r) d_h4.row(r) = d_mean.transpose() * inv_nodes;

        MatX<S> d_h3 = gatv2_backward(t.h3, params.v2_Wl, params.v2_Wr, params.v2_a, t.pooled_edges, t.v2, t.v2_L,
                                      d_h4, grads.v2_Wl, grads.v2_Wr, grads.v2_a);
        MatX<S> d_h2 = topk_pool_backward(t.h2, params.pool_p, t.pool_scores, t.pool_sel, d_h3, grads.pool_p);
        MatX<S> d_h1 = gat_backward(t.h1, params.gat2, params.skip2, graph.edge_weights, t.gat2, d_h2, grads.gat2,
                                    grads.skip2);
        gat_backward(t.h0, params.gat1, params.skip1, graph.edge_weights, t.gat1, d_h1, grads.gat1, grads.skip1);
    }
    return {total, std::move(grads)};
}

}  // namespace causalfp::gnn
