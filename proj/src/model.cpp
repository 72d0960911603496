#include "poslab/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "poslab/aligned.hpp"
#include "poslab/rng.hpp"

namespace poslab {

namespace {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Map = Eigen::Map<MatX<S>>;
template <typename S>
using CMap = Eigen::Map<const MatX<S>>;
template <typename S>
using Stride = Eigen::Stride<Eigen::Dynamic, 1>;
template <typename S>
using Block = Eigen::Map<MatX<S>, 0, Stride<S>>;
template <typename S>
using CBlock = Eigen::Map<const MatX<S>, 0, Stride<S>>;

enum class Init { weight, zero, one };

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using CArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

template <typename S>
void gelu_fwd(const S* pre, S* act, size_t n) {
    CArrMap<S> x(pre, static_cast<Eigen::Index>(n));
    ArrMap<S> y(act, static_cast<Eigen::Index>(n));
    y = S(0.5) * x *
        (S(1) + (S(kGeluScale) * (x + S(kGeluCubic) * x.cube())).tanh());
}

// d_act *= gelu'(pre), elementwise
template <typename S>
void gelu_bwd(const S* pre, S* d_act, size_t n) {
    CArrMap<S> x(pre, static_cast<Eigen::Index>(n));
    ArrMap<S> d(d_act, static_cast<Eigen::Index>(n));
    const auto th = (S(kGeluScale) * (x + S(kGeluCubic) * x.cube())).tanh();
    const auto du = S(kGeluScale) * (S(1) + S(3 * kGeluCubic) * x.square());
    d *= S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th.square()) * du;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < 5) throw Error(Error::Kind::config, "vocab must include reserved ids plus data");
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
        throw Error(Error::Kind::config, "d_model must be divisible by n_heads");
    if (encoder_layers < 1 || decoder_layers < 1)
        throw Error(Error::Kind::config, "layer counts must be positive");
    if (patch_size <= 0 || canvas_size <= 0 || canvas_size % patch_size != 0)
        throw Error(Error::Kind::config, "canvas_size must be divisible by patch_size");
    if (max_caption_len < 2) throw Error(Error::Kind::config, "max_caption_len too small");
}

double lr_at_step(const TrainHyper& hyper, int step) {
    if (hyper.warmup_steps > 0 && step < hyper.warmup_steps)
        return hyper.lr * (step + 1) / hyper.warmup_steps;
    double frac = 1.0 - static_cast<double>(step) / hyper.max_steps;
    return hyper.lr * std::max(0.0, frac);
}

void pack_sequence(const std::vector<int>& ids, int seq_len, int* input_row, int* target_row) {
    const int n = static_cast<int>(ids.size());
    if (n + 1 > seq_len)
        throw Error(Error::Kind::contract, "caption of " + std::to_string(n) +
                                               " tokens plus EOS exceeds max length " +
                                               std::to_string(seq_len));
    input_row[0] = 1;  // BOS
    for (int i = 0; i < n; ++i) {
        input_row[i + 1] = ids[static_cast<size_t>(i)];
        target_row[i] = ids[static_cast<size_t>(i)];
    }
    target_row[n] = 2;  // EOS
    for (int i = n + 1; i < seq_len; ++i) {
        input_row[i] = 0;  // PAD
        target_row[i] = 0;
    }
}

// ---------------------------------------------------------------------------
// workspace

template <typename S>
struct AttnActs {
    avector<S> ln_mean, ln_rstd, ln_out;  // pre-attention norm
    avector<S> qkv;                        // fused q|k|v (self) or q only (cross)
    avector<S> kv;                         // cross-attention k|v over memory
    avector<S> probs;                      // B*H*rows*keys
    avector<S> ctx;                        // head-concatenated context
    avector<S> res;                        // residual output of this block
};

template <typename S>
struct MlpActs {
    avector<S> ln_mean, ln_rstd, ln_out;
    avector<S> pre, act;
    avector<S> res;
};

template <typename S>
struct Workspace {
    int capacity = 0;

    avector<S> patch_in;   // (B*N) x D
    avector<S> enc_embed;  // (B*N) x C
    std::vector<AttnActs<S>> enc_attn;
    std::vector<MlpActs<S>> enc_mlp;
    avector<S> enc_lnf_mean, enc_lnf_rstd;
    avector<S> memory;  // (B*N) x C

    std::vector<int> tokens;   // B*T decoder inputs
    avector<S> dec_embed;  // (B*T) x C
    std::vector<AttnActs<S>> dec_self, dec_cross;
    std::vector<MlpActs<S>> dec_mlp;
    avector<S> dec_lnf_mean, dec_lnf_rstd;
    avector<S> dec_final;  // (B*T) x C
    avector<S> logits, probs;  // (B*T) x V
    int probs_rows = 0;            // rows of the most recent decoder forward

    // backward scratch
    avector<S> d_a, d_b, d_wide, d_qkv, d_kv, d_memory, scores, d_scores;
    avector<S> d_x, d_tmp, d_ex, d_etmp;
    std::vector<uint8_t> noise_pixels;
};

// ---------------------------------------------------------------------------

template <typename Scalar>
struct Net<Scalar>::Impl {
    struct Tensor {
        size_t off = 0;
        int rows = 0, cols = 0;
    };
    struct EncLayer {
        Tensor ln1_g, ln1_b, qkv_w, qkv_b, att_w, att_b;
        Tensor ln2_g, ln2_b, mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    };
    struct DecLayer {
        Tensor ln1_g, ln1_b, self_qkv_w, self_qkv_b, self_w, self_b;
        Tensor ln2_g, ln2_b, cross_q_w, cross_q_b, cross_kv_w, cross_kv_b, cross_w, cross_b;
        Tensor ln3_g, ln3_b, mlp1_w, mlp1_b, mlp2_w, mlp2_b;
    };

    Tensor patch_w, patch_b, enc_pos, enc_lnf_g, enc_lnf_b;
    Tensor tok_emb, dec_pos, dec_lnf_g, dec_lnf_b, head_w, head_b;
    std::vector<EncLayer> enc;
    std::vector<DecLayer> dec;

    avector<Scalar> grads;
    Workspace<Scalar> ws;

    template <typename Store>
    Scalar* p(Store& store, const Tensor& t) {
        return store.data() + t.off;
    }
    template <typename Store>
    const Scalar* p(const Store& store, const Tensor& t) const {
        return store.data() + t.off;
    }
};

template <typename Scalar>
Net<Scalar>::Net(const ModelConfig& cfg) : cfg_(cfg), impl_(new Impl) {
    cfg_.validate();
    const int C = cfg_.d_model, V = cfg_.vocab_size, T = cfg_.max_caption_len;
    const int N = cfg_.n_patches(), D = cfg_.patch_dim(), F = 4 * C;

    size_t cursor = 0;
    std::vector<Init> inits;
    auto reg = [&](const std::string& name, int rows, int cols, Init init) {
        typename Impl::Tensor t{cursor, rows, cols};
        manifest_.push_back({name, cursor, rows, cols});
        inits.push_back(init);
        cursor += static_cast<size_t>(rows) * cols;
        return t;
    };

    impl_->patch_w = reg("enc.patch.w", C, D, Init::weight);
    impl_->patch_b = reg("enc.patch.b", 1, C, Init::zero);
    impl_->enc_pos = reg("enc.pos", N, C, Init::weight);
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
        const std::string base = "enc.l" + std::to_string(l) + ".";
        typename Impl::EncLayer lay;
        lay.ln1_g = reg(base + "ln1.g", 1, C, Init::one);
        lay.ln1_b = reg(base + "ln1.b", 1, C, Init::zero);
        lay.qkv_w = reg(base + "attn.wqkv", 3 * C, C, Init::weight);
        lay.qkv_b = reg(base + "attn.bqkv", 1, 3 * C, Init::zero);
        lay.att_w = reg(base + "attn.wo", C, C, Init::weight);
        lay.att_b = reg(base + "attn.bo", 1, C, Init::zero);
        lay.ln2_g = reg(base + "ln2.g", 1, C, Init::one);
        lay.ln2_b = reg(base + "ln2.b", 1, C, Init::zero);
        lay.mlp1_w = reg(base + "mlp.w1", F, C, Init::weight);
        lay.mlp1_b = reg(base + "mlp.b1", 1, F, Init::zero);
        lay.mlp2_w = reg(base + "mlp.w2", C, F, Init::weight);
        lay.mlp2_b = reg(base + "mlp.b2", 1, C, Init::zero);
        impl_->enc.push_back(lay);
    }
    impl_->enc_lnf_g = reg("enc.lnf.g", 1, C, Init::one);
    impl_->enc_lnf_b = reg("enc.lnf.b", 1, C, Init::zero);

    impl_->tok_emb = reg("dec.tok", V, C, Init::weight);
    impl_->dec_pos = reg("dec.pos", T, C, Init::weight);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
        const std::string base = "dec.l" + std::to_string(l) + ".";
        typename Impl::DecLayer lay;
        lay.ln1_g = reg(base + "ln1.g", 1, C, Init::one);
        lay.ln1_b = reg(base + "ln1.b", 1, C, Init::zero);
        lay.self_qkv_w = reg(base + "self.wqkv", 3 * C, C, Init::weight);
        lay.self_qkv_b = reg(base + "self.bqkv", 1, 3 * C, Init::zero);
        lay.self_w = reg(base + "self.wo", C, C, Init::weight);
        lay.self_b = reg(base + "self.bo", 1, C, Init::zero);
        lay.ln2_g = reg(base + "ln2.g", 1, C, Init::one);
        lay.ln2_b = reg(base + "ln2.b", 1, C, Init::zero);
        lay.cross_q_w = reg(base + "cross.wq", C, C, Init::weight);
        lay.cross_q_b = reg(base + "cross.bq", 1, C, Init::zero);
        lay.cross_kv_w = reg(base + "cross.wkv", 2 * C, C, Init::weight);
        lay.cross_kv_b = reg(base + "cross.bkv", 1, 2 * C, Init::zero);
        lay.cross_w = reg(base + "cross.wo", C, C, Init::weight);
        lay.cross_b = reg(base + "cross.bo", 1, C, Init::zero);
        lay.ln3_g = reg(base + "ln3.g", 1, C, Init::one);
        lay.ln3_b = reg(base + "ln3.b", 1, C, Init::zero);
        lay.mlp1_w = reg(base + "mlp.w1", F, C, Init::weight);
        lay.mlp1_b = reg(base + "mlp.b1", 1, F, Init::zero);
        lay.mlp2_w = reg(base + "mlp.w2", C, F, Init::weight);
        lay.mlp2_b = reg(base + "mlp.b2", 1, C, Init::zero);
        impl_->dec.push_back(lay);
    }
    impl_->dec_lnf_g = reg("dec.lnf.g", 1, C, Init::one);
    impl_->dec_lnf_b = reg("dec.lnf.b", 1, C, Init::zero);
    impl_->head_w = reg("dec.head.w", V, C, Init::weight);
    impl_->head_b = reg("dec.head.b", 1, V, Init::zero);

    params_.assign(cursor, Scalar(0));
    impl_->grads.assign(cursor, Scalar(0));

    // Truncated normal (sigma 0.02, clipped at 2 sigma) for projections and
    // embeddings; ones for norm gains; zeros elsewhere. Draws happen in
    // manifest order from a single seeded stream.
    Rng rng(derive_seed(cfg_.seed, /*stream=*/0x111));
    for (size_t i = 0; i < manifest_.size(); ++i) {
        Scalar* dst = params_.data() + manifest_[i].offset;
        const size_t n = manifest_[i].count();
        switch (inits[i]) {
            case Init::weight:
                for (size_t k = 0; k < n; ++k)
                    dst[k] = static_cast<Scalar>(rng.truncated_normal(0.02));
                break;
            case Init::one:
                std::fill(dst, dst + n, Scalar(1));
                break;
            case Init::zero:
                break;
        }
    }
}

template <typename Scalar>
Net<Scalar>::~Net() = default;
template <typename Scalar>
Net<Scalar>::Net(Net&&) noexcept = default;
template <typename Scalar>
Net<Scalar>& Net<Scalar>::operator=(Net&&) noexcept = default;

template <typename Scalar>
const ParamInfo& Net<Scalar>::param_info(const std::string& name) const {
    for (const auto& info : manifest_)
        if (info.name == name) return info;
    throw Error(Error::Kind::contract, "unknown parameter path: " + name);
}

template <typename Scalar>
AdamState<Scalar> Net<Scalar>::fresh_optimizer() const {
    AdamState<Scalar> st;
    st.m.assign(params_.size(), Scalar(0));
    st.v.assign(params_.size(), Scalar(0));
    st.step = 0;
    return st;
}

// ---------------------------------------------------------------------------
// forward/backward building blocks (free functions over raw buffers)

namespace {

// y = x * w^T + b ; x: R x In, w: Out x In, y: R x Out
template <typename S>
void linear_fwd(const S* x, const S* w, const S* b, S* y, int rows, int in, int out) {
    CMap<S> xm(x, rows, in), wm(w, out, in);
    Map<S> ym(y, rows, out);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += CMap<S>(b, 1, out).row(0);
}

template <typename S>
void linear_bwd(const S* x, const S* w, const S* dy, S* dx, S* dw, S* db, int rows, int in,
                int out) {
    CMap<S> xm(x, rows, in), wm(w, out, in), dym(dy, rows, out);
    if (dx) Map<S>(dx, rows, in).noalias() = dym * wm;
    Map<S>(dw, out, in).noalias() += dym.transpose() * xm;
    Map<S>(db, 1, out).row(0) += dym.colwise().sum();
}

template <typename S>
void layernorm_fwd(const S* x, const S* g, const S* b, S* y, S* mean, S* rstd, int rows, int cols) {
    constexpr S eps = static_cast<S>(1e-5);
    CArrMap<S> gv(g, cols), bv(b, cols);
    for (int r = 0; r < rows; ++r) {
        CArrMap<S> xr(x + static_cast<size_t>(r) * cols, cols);
        ArrMap<S> yr(y + static_cast<size_t>(r) * cols, cols);
        const S mu = xr.mean();
        const S var = (xr - mu).square().sum() / cols;
        const S rs = S(1) / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        yr = (xr - mu) * rs * gv + bv;
    }
}

template <typename S>
void layernorm_bwd(const S* x, const S* g, const S* mean, const S* rstd, const S* dy, S* dx, S* dg,
                   S* db, int rows, int cols) {
    CArrMap<S> gv(g, cols);
    ArrMap<S> dgv(dg, cols), dbv(db, cols);
    for (int r = 0; r < rows; ++r) {
        CArrMap<S> xr(x + static_cast<size_t>(r) * cols, cols);
        CArrMap<S> dyr(dy + static_cast<size_t>(r) * cols, cols);
        ArrMap<S> dxr(dx + static_cast<size_t>(r) * cols, cols);
        const S mu = mean[r], rs = rstd[r];
        const auto xhat = (xr - mu) * rs;
        const auto dxhat = dyr * gv;
        const S sum_dxhat = dxhat.sum() / cols;
        const S sum_dxhat_xhat = (dxhat * xhat).sum() / cols;
        dgv += dyr * xhat;
        dbv += dyr;
        dxr = rs * (dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
    }
}

// Multi-head attention over precomputed projections.
//   q: (B*Rq) x C laid out per sequence; keys/values: (B*Rk) x C strided
//   inside a wider buffer (stride cols apart). probs: B*H*Rq*Rk.
template <typename S>
struct AttnView {
    const S* base;
    int stride;  // row stride of the underlying buffer
    int col0;    // first column of this section
};

template <typename S>
void attention_fwd(AttnView<S> q, AttnView<S> k, AttnView<S> v, S* probs, S* ctx, S* scores,
                   int B, int H, int Rq, int Rk, int head_dim, int ctx_stride, bool causal) {
    (void)scores;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            CBlock<S> Q(q.base + static_cast<size_t>(b) * Rq * q.stride + q.col0 + h * head_dim,
                        Rq, head_dim, Stride<S>(q.stride, 1));
            CBlock<S> K(k.base + static_cast<size_t>(b) * Rk * k.stride + k.col0 + h * head_dim,
                        Rk, head_dim, Stride<S>(k.stride, 1));
            CBlock<S> V(v.base + static_cast<size_t>(b) * Rk * v.stride + v.col0 + h * head_dim,
                        Rk, head_dim, Stride<S>(v.stride, 1));
            // scores land directly in the probs block; softmax runs in place
            S* pbase = probs + (static_cast<size_t>(b) * H + h) * Rq * Rk;
            Map<S> P(pbase, Rq, Rk);
            P.noalias() = Q * K.transpose() * scale;
            for (int i = 0; i < Rq; ++i) {
                const int limit = causal ? i + 1 : Rk;
                ArrMap<S> row(pbase + static_cast<size_t>(i) * Rk, limit);
                row = (row - row.maxCoeff()).exp();
                row *= S(1) / row.sum();
                for (int j = limit; j < Rk; ++j) pbase[static_cast<size_t>(i) * Rk + j] = 0;
            }
            Block<S> Cx(ctx + static_cast<size_t>(b) * Rq * ctx_stride + h * head_dim, Rq,
                        head_dim, Stride<S>(ctx_stride, 1));
            Cx.noalias() = P * V;
        }
    }
}

// dq/dk/dv accumulate into strided views mirroring the forward layout.
// Masked positions carry zero probability, so no explicit causal handling is
// needed on the way back.
template <typename S>
void attention_bwd(AttnView<S> q, AttnView<S> k, AttnView<S> v, const S* probs, const S* dctx,
                   AttnView<S> dq, AttnView<S> dk, AttnView<S> dv, S* d_scores, int B, int H,
                   int Rq, int Rk, int head_dim, int ctx_stride) {
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
            CBlock<S> Q(q.base + static_cast<size_t>(b) * Rq * q.stride + q.col0 + h * head_dim,
                        Rq, head_dim, Stride<S>(q.stride, 1));
            CBlock<S> K(k.base + static_cast<size_t>(b) * Rk * k.stride + k.col0 + h * head_dim,
                        Rk, head_dim, Stride<S>(k.stride, 1));
            CBlock<S> V(v.base + static_cast<size_t>(b) * Rk * v.stride + v.col0 + h * head_dim,
                        Rk, head_dim, Stride<S>(v.stride, 1));
            CMap<S> P(probs + (static_cast<size_t>(b) * H + h) * Rq * Rk, Rq, Rk);
            CBlock<S> dCx(dctx + static_cast<size_t>(b) * Rq * ctx_stride + h * head_dim, Rq,
                          head_dim, Stride<S>(ctx_stride, 1));
            Block<S> dQ(const_cast<S*>(dq.base) + static_cast<size_t>(b) * Rq * dq.stride +
                            dq.col0 + h * head_dim,
                        Rq, head_dim, Stride<S>(dq.stride, 1));
            Block<S> dK(const_cast<S*>(dk.base) + static_cast<size_t>(b) * Rk * dk.stride +
                            dk.col0 + h * head_dim,
                        Rk, head_dim, Stride<S>(dk.stride, 1));
            Block<S> dV(const_cast<S*>(dv.base) + static_cast<size_t>(b) * Rk * dv.stride +
                            dv.col0 + h * head_dim,
                        Rk, head_dim, Stride<S>(dv.stride, 1));

            dV.noalias() += P.transpose() * dCx;
            Map<S> dP(d_scores, Rq, Rk);
            dP.noalias() = dCx * V.transpose();
            // softmax backward: dS = P .* (dP - rowsum(dP .* P))
            for (int i = 0; i < Rq; ++i) {
                ArrMap<S> dp_row(d_scores + static_cast<size_t>(i) * Rk, Rk);
                CArrMap<S> p_row(P.data() + static_cast<size_t>(i) * Rk, Rk);
                const S dot = (dp_row * p_row).sum();
                dp_row = p_row * (dp_row - dot);
            }
            dQ.noalias() += dP * K * scale;
            dK.noalias() += dP.transpose() * Q * scale;
        }
    }
}

template <typename S>
void add_inplace(S* dst, const S* src, size_t n) {
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(dst, static_cast<Eigen::Index>(n)) +=
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(src, static_cast<Eigen::Index>(n));
}

}  // namespace

// ---------------------------------------------------------------------------
// Net internals: the per-batch forward and backward passes live in a helper
// so train/eval/scoring share one code path.

template <typename Scalar>
struct Pass {
    using I = typename Net<Scalar>::Impl;
    Net<Scalar>& net;
    typename Net<Scalar>::Impl& im;
    const ModelConfig& cfg;
    int B;

    int C, V, T, N, D, F, H, Dh;

    Pass(Net<Scalar>& n, typename Net<Scalar>::Impl& i, int batch)
        : net(n), im(i), cfg(n.config()), B(batch) {
        C = cfg.d_model;
        V = cfg.vocab_size;
        T = cfg.max_caption_len;
        N = cfg.n_patches();
        D = cfg.patch_dim();
        F = 4 * C;
        H = cfg.n_heads;
        Dh = C / H;
        ensure_workspace();
    }

    void ensure_workspace() {
        auto& ws = im.ws;
        if (ws.capacity >= B) return;
        ws.capacity = B;
        const size_t bn = static_cast<size_t>(B) * N, bt = static_cast<size_t>(B) * T;
        ws.patch_in.assign(bn * D, Scalar(0));
        ws.enc_embed.assign(bn * C, Scalar(0));
        ws.enc_attn.assign(static_cast<size_t>(cfg.encoder_layers), {});
        ws.enc_mlp.assign(static_cast<size_t>(cfg.encoder_layers), {});
        for (auto& a : ws.enc_attn) {
            a.ln_mean.assign(bn, Scalar(0));
            a.ln_rstd.assign(bn, Scalar(0));
            a.ln_out.assign(bn * C, Scalar(0));
            a.qkv.assign(bn * 3 * C, Scalar(0));
            a.probs.assign(static_cast<size_t>(B) * H * N * N, Scalar(0));
            a.ctx.assign(bn * C, Scalar(0));
            a.res.assign(bn * C, Scalar(0));
        }
        for (auto& m : ws.enc_mlp) {
            m.ln_mean.assign(bn, Scalar(0));
            m.ln_rstd.assign(bn, Scalar(0));
            m.ln_out.assign(bn * C, Scalar(0));
            m.pre.assign(bn * F, Scalar(0));
            m.act.assign(bn * F, Scalar(0));
            m.res.assign(bn * C, Scalar(0));
        }
        ws.enc_lnf_mean.assign(bn, Scalar(0));
        ws.enc_lnf_rstd.assign(bn, Scalar(0));
        ws.memory.assign(bn * C, Scalar(0));

        ws.tokens.assign(bt, 0);
        ws.dec_embed.assign(bt * C, Scalar(0));
        ws.dec_self.assign(static_cast<size_t>(cfg.decoder_layers), {});
        ws.dec_cross.assign(static_cast<size_t>(cfg.decoder_layers), {});
        ws.dec_mlp.assign(static_cast<size_t>(cfg.decoder_layers), {});
        for (auto& a : ws.dec_self) {
            a.ln_mean.assign(bt, Scalar(0));
            a.ln_rstd.assign(bt, Scalar(0));
            a.ln_out.assign(bt * C, Scalar(0));
            a.qkv.assign(bt * 3 * C, Scalar(0));
            a.probs.assign(static_cast<size_t>(B) * H * T * T, Scalar(0));
            a.ctx.assign(bt * C, Scalar(0));
            a.res.assign(bt * C, Scalar(0));
        }
        for (auto& a : ws.dec_cross) {
            a.ln_mean.assign(bt, Scalar(0));
            a.ln_rstd.assign(bt, Scalar(0));
            a.ln_out.assign(bt * C, Scalar(0));
            a.qkv.assign(bt * C, Scalar(0));
            a.kv.assign(bn * 2 * C, Scalar(0));
            a.probs.assign(static_cast<size_t>(B) * H * T * N, Scalar(0));
            a.ctx.assign(bt * C, Scalar(0));
            a.res.assign(bt * C, Scalar(0));
        }
        for (auto& m : ws.dec_mlp) {
            m.ln_mean.assign(bt, Scalar(0));
            m.ln_rstd.assign(bt, Scalar(0));
            m.ln_out.assign(bt * C, Scalar(0));
            m.pre.assign(bt * F, Scalar(0));
            m.act.assign(bt * F, Scalar(0));
            m.res.assign(bt * C, Scalar(0));
        }
        ws.dec_lnf_mean.assign(bt, Scalar(0));
        ws.dec_lnf_rstd.assign(bt, Scalar(0));
        ws.dec_final.assign(bt * C, Scalar(0));
        ws.logits.assign(bt * V, Scalar(0));
        ws.probs.assign(bt * V, Scalar(0));

        const size_t wide = std::max(bn, bt);
        ws.d_a.assign(wide * C, Scalar(0));
        ws.d_b.assign(wide * C, Scalar(0));
        ws.d_wide.assign(wide * std::max(F, 3 * C), Scalar(0));
        ws.d_qkv.assign(std::max(bn, bt) * 3 * C, Scalar(0));
        ws.d_kv.assign(bn * 2 * C, Scalar(0));
        ws.d_memory.assign(bn * C, Scalar(0));
        ws.d_x.assign(bt * C, Scalar(0));
        ws.d_tmp.assign(bt * C, Scalar(0));
        ws.d_ex.assign(bn * C, Scalar(0));
        ws.d_etmp.assign(bn * C, Scalar(0));
        const size_t smax = static_cast<size_t>(std::max(N, T));
        ws.scores.assign(smax * smax, Scalar(0));
        ws.d_scores.assign(smax * std::max({N, T}), Scalar(0));
        ws.noise_pixels.assign(static_cast<size_t>(cfg.canvas_size) * cfg.canvas_size * 3, 0);
    }

    void load_images(const std::vector<const uint8_t*>& images) {
        auto& ws = im.ws;
        const int side = cfg.patches_per_side(), P = cfg.patch_size, S = cfg.canvas_size;
        for (int b = 0; b < B; ++b) {
            const uint8_t* img = images[static_cast<size_t>(b)];
            for (int pr = 0; pr < side; ++pr)
                for (int pc = 0; pc < side; ++pc) {
                    Scalar* row =
                        ws.patch_in.data() +
                        (static_cast<size_t>(b) * N + static_cast<size_t>(pr) * side + pc) * D;
                    for (int dy = 0; dy < P; ++dy) {
                        const uint8_t* src =
                            img + ((static_cast<size_t>(pr) * P + dy) * S + pc * P) * 3;
                        for (int k = 0; k < P * 3; ++k)
                            row[dy * P * 3 + k] =
                                static_cast<Scalar>(src[k] / Scalar(127.5) - Scalar(1));
                    }
                }
        }
    }

    void attn_block_fwd(const Scalar* x, AttnActs<Scalar>& a, const typename I::Tensor& ln_g,
                        const typename I::Tensor& ln_b, const typename I::Tensor& qkv_w,
                        const typename I::Tensor& qkv_b, const typename I::Tensor& out_w,
                        const typename I::Tensor& out_b, int rows_per_seq, bool causal) {
        auto& P = net.params();
        const int R = rows_per_seq;
        const int rows = B * R;
        layernorm_fwd(x, im.p(P, ln_g), im.p(P, ln_b), a.ln_out.data(), a.ln_mean.data(),
                      a.ln_rstd.data(), rows, C);
        linear_fwd(a.ln_out.data(), im.p(P, qkv_w), im.p(P, qkv_b), a.qkv.data(), rows, C, 3 * C);
        AttnView<Scalar> q{a.qkv.data(), 3 * C, 0}, k{a.qkv.data(), 3 * C, C},
            v{a.qkv.data(), 3 * C, 2 * C};
        attention_fwd(q, k, v, a.probs.data(), a.ctx.data(), im.ws.scores.data(), B, H, R, R, Dh, C,
                      causal);
        // res = x + ctx * Wo^T + bo
        linear_fwd(a.ctx.data(), im.p(P, out_w), im.p(P, out_b), a.res.data(), rows, C, C);
        add_inplace(a.res.data(), x, static_cast<size_t>(rows) * C);
    }

    // dx_out receives the gradient wrt the block input (residual included).
    void attn_block_bwd(const Scalar* x, const AttnActs<Scalar>& a, const typename I::Tensor& ln_g,
                        const typename I::Tensor& ln_b, const typename I::Tensor& qkv_w,
                        const typename I::Tensor& qkv_b, const typename I::Tensor& out_w,
                        const typename I::Tensor& out_b, int rows_per_seq, bool causal,
                        const Scalar* d_res, Scalar* dx_out) {
        auto& P = net.params();
        auto& G = im.grads;
        auto& ws = im.ws;
        const int R = rows_per_seq;
        const int rows = B * R;

        // through the output projection
        Scalar* d_ctx = ws.d_a.data();
        linear_bwd(a.ctx.data(), im.p(P, out_w), d_res, d_ctx, im.p(G, out_w), im.p(G, out_b),
                   rows, C, C);

        std::fill(ws.d_qkv.begin(), ws.d_qkv.begin() + static_cast<size_t>(rows) * 3 * C,
                  Scalar(0));
        AttnView<Scalar> q{a.qkv.data(), 3 * C, 0}, k{a.qkv.data(), 3 * C, C},
            v{a.qkv.data(), 3 * C, 2 * C};
        AttnView<Scalar> dq{ws.d_qkv.data(), 3 * C, 0}, dk{ws.d_qkv.data(), 3 * C, C},
            dv{ws.d_qkv.data(), 3 * C, 2 * C};
        (void)causal;
        attention_bwd(q, k, v, a.probs.data(), d_ctx, dq, dk, dv, ws.d_scores.data(), B, H, R, R,
                      Dh, C);

        Scalar* d_ln_out = ws.d_b.data();
        linear_bwd(a.ln_out.data(), im.p(P, qkv_w), ws.d_qkv.data(), d_ln_out, im.p(G, qkv_w),
                   im.p(G, qkv_b), rows, C, 3 * C);

        layernorm_bwd(x, im.p(P, ln_g), a.ln_mean.data(), a.ln_rstd.data(), d_ln_out, dx_out,
                      im.p(G, ln_g), im.p(G, ln_b), rows, C);
        // residual path
        add_inplace(dx_out, d_res, static_cast<size_t>(rows) * C);
    }

    void mlp_block_fwd(const Scalar* x, MlpActs<Scalar>& m, const typename I::Tensor& ln_g,
                       const typename I::Tensor& ln_b, const typename I::Tensor& w1,
                       const typename I::Tensor& b1, const typename I::Tensor& w2,
                       const typename I::Tensor& b2, int rows) {
        auto& P = net.params();
        layernorm_fwd(x, im.p(P, ln_g), im.p(P, ln_b), m.ln_out.data(), m.ln_mean.data(),
                      m.ln_rstd.data(), rows, C);
        linear_fwd(m.ln_out.data(), im.p(P, w1), im.p(P, b1), m.pre.data(), rows, C, F);
        gelu_fwd(m.pre.data(), m.act.data(), static_cast<size_t>(rows) * F);
        linear_fwd(m.act.data(), im.p(P, w2), im.p(P, b2), m.res.data(), rows, F, C);
        add_inplace(m.res.data(), x, static_cast<size_t>(rows) * C);
    }

    void mlp_block_bwd(const Scalar* x, const MlpActs<Scalar>& m, const typename I::Tensor& ln_g,
                       const typename I::Tensor& ln_b, const typename I::Tensor& w1,
                       const typename I::Tensor& b1, const typename I::Tensor& w2,
                       const typename I::Tensor& b2, int rows, const Scalar* d_res, Scalar* dx_out) {
        auto& P = net.params();
        auto& G = im.grads;
        auto& ws = im.ws;
        Scalar* d_act = ws.d_wide.data();
        linear_bwd(m.act.data(), im.p(P, w2), d_res, d_act, im.p(G, w2), im.p(G, b2), rows, F, C);
        gelu_bwd(m.pre.data(), d_act, static_cast<size_t>(rows) * F);
        Scalar* d_ln_out = ws.d_a.data();
        linear_bwd(m.ln_out.data(), im.p(P, w1), d_act, d_ln_out, im.p(G, w1), im.p(G, b1), rows,
                   C, F);
        layernorm_bwd(x, im.p(P, ln_g), m.ln_mean.data(), m.ln_rstd.data(), d_ln_out, dx_out,
                      im.p(G, ln_g), im.p(G, ln_b), rows, C);
        add_inplace(dx_out, d_res, static_cast<size_t>(rows) * C);
    }

    // Duplicates each image's memory block for `group` caption rows; blocks
    // are expanded from the back so sources are read before being overwritten.
    void expand_memory(int b_img, int group) {
        if (group <= 1) return;
        auto& mem = im.ws.memory;
        const size_t block = static_cast<size_t>(N) * C;
        for (int bd = b_img * group - 1; bd >= 0; --bd) {
            const int src = bd / group;
            if (src == bd) continue;
            std::copy(mem.begin() + static_cast<size_t>(src) * block,
                      mem.begin() + static_cast<size_t>(src + 1) * block,
                      mem.begin() + static_cast<size_t>(bd) * block);
        }
    }

    void encoder_fwd() {
        auto& ws = im.ws;
        auto& P = net.params();
        const int rows = B * N;
        linear_fwd(ws.patch_in.data(), im.p(P, im.patch_w), im.p(P, im.patch_b),
                   ws.enc_embed.data(), rows, D, C);
        // learned positions repeat per image
        CMap<Scalar> pos(im.p(P, im.enc_pos), N, C);
        for (int b = 0; b < B; ++b)
            Map<Scalar>(ws.enc_embed.data() + static_cast<size_t>(b) * N * C, N, C) += pos;

        const Scalar* x = ws.enc_embed.data();
        for (int l = 0; l < cfg.encoder_layers; ++l) {
            auto& lay = im.enc[static_cast<size_t>(l)];
            attn_block_fwd(x, ws.enc_attn[static_cast<size_t>(l)], lay.ln1_g, lay.ln1_b, lay.qkv_w,
                           lay.qkv_b, lay.att_w, lay.att_b, N, /*causal=*/false);
            mlp_block_fwd(ws.enc_attn[static_cast<size_t>(l)].res.data(),
                          ws.enc_mlp[static_cast<size_t>(l)], lay.ln2_g, lay.ln2_b, lay.mlp1_w,
                          lay.mlp1_b, lay.mlp2_w, lay.mlp2_b, rows);
            x = ws.enc_mlp[static_cast<size_t>(l)].res.data();
        }
        layernorm_fwd(x, im.p(P, im.enc_lnf_g), im.p(P, im.enc_lnf_b), ws.memory.data(),
                      ws.enc_lnf_mean.data(), ws.enc_lnf_rstd.data(), rows, C);
    }

    void decoder_fwd() {
        auto& ws = im.ws;
        auto& P = net.params();
        const int rows = B * T;
        const Scalar* tok = im.p(P, im.tok_emb);
        const Scalar* pos = im.p(P, im.dec_pos);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                const int id = ws.tokens[static_cast<size_t>(b) * T + t];
                Scalar* dst = ws.dec_embed.data() + (static_cast<size_t>(b) * T + t) * C;
                const Scalar* te = tok + static_cast<size_t>(id) * C;
                const Scalar* pe = pos + static_cast<size_t>(t) * C;
                for (int c = 0; c < C; ++c) dst[c] = te[c] + pe[c];
            }

        const Scalar* x = ws.dec_embed.data();
        for (int l = 0; l < cfg.decoder_layers; ++l) {
            auto& lay = im.dec[static_cast<size_t>(l)];
            auto& self = ws.dec_self[static_cast<size_t>(l)];
            auto& cross = ws.dec_cross[static_cast<size_t>(l)];
            attn_block_fwd(x, self, lay.ln1_g, lay.ln1_b, lay.self_qkv_w, lay.self_qkv_b,
                           lay.self_w, lay.self_b, T, /*causal=*/true);

            // cross-attention: queries from tokens, keys/values from memory
            layernorm_fwd(self.res.data(), im.p(P, lay.ln2_g), im.p(P, lay.ln2_b),
                          cross.ln_out.data(), cross.ln_mean.data(), cross.ln_rstd.data(), rows, C);
            linear_fwd(cross.ln_out.data(), im.p(P, lay.cross_q_w), im.p(P, lay.cross_q_b),
                       cross.qkv.data(), rows, C, C);
            linear_fwd(ws.memory.data(), im.p(P, lay.cross_kv_w), im.p(P, lay.cross_kv_b),
                       cross.kv.data(), B * N, C, 2 * C);
            AttnView<Scalar> q{cross.qkv.data(), C, 0}, k{cross.kv.data(), 2 * C, 0},
                v{cross.kv.data(), 2 * C, C};
            attention_fwd(q, k, v, cross.probs.data(), cross.ctx.data(), ws.scores.data(), B, H, T,
                          N, Dh, C, /*causal=*/false);
            linear_fwd(cross.ctx.data(), im.p(P, lay.cross_w), im.p(P, lay.cross_b),
                       cross.res.data(), rows, C, C);
            add_inplace(cross.res.data(), self.res.data(), static_cast<size_t>(rows) * C);

            mlp_block_fwd(cross.res.data(), ws.dec_mlp[static_cast<size_t>(l)], lay.ln3_g,
                          lay.ln3_b, lay.mlp1_w, lay.mlp1_b, lay.mlp2_w, lay.mlp2_b, rows);
            x = ws.dec_mlp[static_cast<size_t>(l)].res.data();
        }
        layernorm_fwd(x, im.p(P, im.dec_lnf_g), im.p(P, im.dec_lnf_b), ws.dec_final.data(),
                      ws.dec_lnf_mean.data(), ws.dec_lnf_rstd.data(), rows, C);
        linear_fwd(ws.dec_final.data(), im.p(P, im.head_w), im.p(P, im.head_b), ws.logits.data(),
                   rows, C, V);

        // row-wise softmax
        ws.probs_rows = rows;
        for (int r = 0; r < rows; ++r) {
            CArrMap<Scalar> lr(ws.logits.data() + static_cast<size_t>(r) * V, V);
            ArrMap<Scalar> pr(ws.probs.data() + static_cast<size_t>(r) * V, V);
            pr = (lr - lr.maxCoeff()).exp();
            pr *= Scalar(1) / pr.sum();
        }
    }

    // Mean cross-entropy over non-pad targets; fills d_logits in-place into
    // ws.probs when requested.
    double loss_from_probs(const std::vector<int>& targets, bool prepare_backward) {
        auto& ws = im.ws;
        const int rows = B * T;
        int n_valid = 0;
        for (int r = 0; r < rows; ++r)
            if (targets[static_cast<size_t>(r)] != 0) ++n_valid;
        if (n_valid == 0) throw Error(Error::Kind::contract, "batch has no supervised positions");

        double loss = 0;
        for (int r = 0; r < rows; ++r) {
            const int tgt = targets[static_cast<size_t>(r)];
            Scalar* pr = ws.probs.data() + static_cast<size_t>(r) * V;
            if (tgt != 0)
                loss -= std::log(std::max(static_cast<double>(pr[tgt]),
                                          std::numeric_limits<double>::min()));
        }
        loss /= n_valid;

        if (prepare_backward) {
            const Scalar inv = Scalar(1) / static_cast<Scalar>(n_valid);
            for (int r = 0; r < rows; ++r) {
                const int tgt = targets[static_cast<size_t>(r)];
                Scalar* pr = ws.probs.data() + static_cast<size_t>(r) * V;
                if (tgt == 0) {
                    std::fill(pr, pr + V, Scalar(0));
                } else {
                    for (int i = 0; i < V; ++i) pr[i] *= inv;
                    pr[tgt] -= inv;
                }
            }
        }
        return loss;
    }

    void backward() {
        auto& ws = im.ws;
        auto& P = net.params();
        auto& G = im.grads;
        const int rows = B * T;
        const int enc_rows = B * N;

        // head and final norm; ws.probs now holds d_logits
        Scalar* d_final = ws.d_a.data();
        linear_bwd(ws.dec_final.data(), im.p(P, im.head_w), ws.probs.data(), d_final,
                   im.p(G, im.head_w), im.p(G, im.head_b), rows, C, V);
        auto& d_x = ws.d_x;
        {
            const Scalar* x_in = cfg.decoder_layers > 0
                                     ? ws.dec_mlp[static_cast<size_t>(cfg.decoder_layers - 1)]
                                           .res.data()
                                     : ws.dec_embed.data();
            layernorm_bwd(x_in, im.p(P, im.dec_lnf_g), ws.dec_lnf_mean.data(),
                          ws.dec_lnf_rstd.data(), d_final, d_x.data(), im.p(G, im.dec_lnf_g),
                          im.p(G, im.dec_lnf_b), rows, C);
        }

        std::fill(ws.d_memory.begin(), ws.d_memory.begin() + static_cast<size_t>(enc_rows) * C,
                  Scalar(0));
        auto& d_tmp = ws.d_tmp;

        for (int l = cfg.decoder_layers - 1; l >= 0; --l) {
            auto& lay = im.dec[static_cast<size_t>(l)];
            auto& self = ws.dec_self[static_cast<size_t>(l)];
            auto& cross = ws.dec_cross[static_cast<size_t>(l)];
            auto& mlp = ws.dec_mlp[static_cast<size_t>(l)];

            mlp_block_bwd(cross.res.data(), mlp, lay.ln3_g, lay.ln3_b, lay.mlp1_w, lay.mlp1_b,
                          lay.mlp2_w, lay.mlp2_b, rows, d_x.data(), d_tmp.data());
            std::swap(d_x, d_tmp);

            // cross-attention backward
            {
                Scalar* d_ctx = ws.d_b.data();
                linear_bwd(cross.ctx.data(), im.p(P, lay.cross_w), d_x.data(), d_ctx,
                           im.p(G, lay.cross_w), im.p(G, lay.cross_b), rows, C, C);

                std::fill(ws.d_qkv.begin(), ws.d_qkv.begin() + static_cast<size_t>(rows) * C,
                          Scalar(0));
                std::fill(ws.d_kv.begin(), ws.d_kv.end(), Scalar(0));
                AttnView<Scalar> q{cross.qkv.data(), C, 0}, k{cross.kv.data(), 2 * C, 0},
                    v{cross.kv.data(), 2 * C, C};
                AttnView<Scalar> dq{ws.d_qkv.data(), C, 0}, dk{ws.d_kv.data(), 2 * C, 0},
                    dv{ws.d_kv.data(), 2 * C, C};
                attention_bwd(q, k, v, cross.probs.data(), d_ctx, dq, dk, dv, ws.d_scores.data(),
                              B, H, T, N, Dh, C);

                // kv projection: accumulate into the shared memory gradient
                Scalar* d_mem_part = ws.d_b.data();
                linear_bwd(ws.memory.data(), im.p(P, lay.cross_kv_w), ws.d_kv.data(), d_mem_part,
                           im.p(G, lay.cross_kv_w), im.p(G, lay.cross_kv_b), enc_rows, C, 2 * C);
                add_inplace(ws.d_memory.data(), d_mem_part, static_cast<size_t>(enc_rows) * C);

                Scalar* d_ln_out = ws.d_b.data();
                linear_bwd(cross.ln_out.data(), im.p(P, lay.cross_q_w), ws.d_qkv.data(), d_ln_out,
                           im.p(G, lay.cross_q_w), im.p(G, lay.cross_q_b), rows, C, C);
                layernorm_bwd(self.res.data(), im.p(P, lay.ln2_g), cross.ln_mean.data(),
                              cross.ln_rstd.data(), d_ln_out, d_tmp.data(), im.p(G, lay.ln2_g),
                              im.p(G, lay.ln2_b), rows, C);
                add_inplace(d_tmp.data(), d_x.data(), static_cast<size_t>(rows) * C);
                std::swap(d_x, d_tmp);
            }

            const Scalar* x_in = l > 0 ? ws.dec_mlp[static_cast<size_t>(l - 1)].res.data()
                                       : ws.dec_embed.data();
            attn_block_bwd(x_in, self, lay.ln1_g, lay.ln1_b, lay.self_qkv_w, lay.self_qkv_b,
                           lay.self_w, lay.self_b, T, /*causal=*/true, d_x.data(), d_tmp.data());
            std::swap(d_x, d_tmp);
        }

        // token + position embedding gradients
        {
            Scalar* d_tok = im.p(G, im.tok_emb);
            Scalar* d_pos = im.p(G, im.dec_pos);
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < T; ++t) {
                    const int id = ws.tokens[static_cast<size_t>(b) * T + t];
                    const Scalar* src = d_x.data() + (static_cast<size_t>(b) * T + t) * C;
                    Scalar* te = d_tok + static_cast<size_t>(id) * C;
                    Scalar* pe = d_pos + static_cast<size_t>(t) * C;
                    for (int c = 0; c < C; ++c) {
                        te[c] += src[c];
                        pe[c] += src[c];
                    }
                }
        }

        // encoder backward, seeded by the accumulated memory gradient
        auto& d_ex = ws.d_ex;
        {
            const Scalar* x_in = cfg.encoder_layers > 0
                                     ? ws.enc_mlp[static_cast<size_t>(cfg.encoder_layers - 1)]
                                           .res.data()
                                     : ws.enc_embed.data();
            layernorm_bwd(x_in, im.p(P, im.enc_lnf_g), ws.enc_lnf_mean.data(),
                          ws.enc_lnf_rstd.data(), ws.d_memory.data(), d_ex.data(),
                          im.p(G, im.enc_lnf_g), im.p(G, im.enc_lnf_b), enc_rows, C);
        }
        auto& d_etmp = ws.d_etmp;
        for (int l = cfg.encoder_layers - 1; l >= 0; --l) {
            auto& lay = im.enc[static_cast<size_t>(l)];
            auto& attn = ws.enc_attn[static_cast<size_t>(l)];
            auto& mlp = ws.enc_mlp[static_cast<size_t>(l)];
            mlp_block_bwd(attn.res.data(), mlp, lay.ln2_g, lay.ln2_b, lay.mlp1_w, lay.mlp1_b,
                          lay.mlp2_w, lay.mlp2_b, enc_rows, d_ex.data(), d_etmp.data());
            std::swap(d_ex, d_etmp);
            const Scalar* x_in = l > 0 ? ws.enc_mlp[static_cast<size_t>(l - 1)].res.data()
                                       : ws.enc_embed.data();
            attn_block_bwd(x_in, attn, lay.ln1_g, lay.ln1_b, lay.qkv_w, lay.qkv_b, lay.att_w,
                           lay.att_b, N, /*causal=*/false, d_ex.data(), d_etmp.data());
            std::swap(d_ex, d_etmp);
        }

        // patch projection + position embedding
        {
            Scalar* d_pos = im.p(G, im.enc_pos);
            Map<Scalar> dpos(d_pos, N, C);
            for (int b = 0; b < B; ++b)
                dpos += CMap<Scalar>(d_ex.data() + static_cast<size_t>(b) * N * C, N, C);
            linear_bwd(ws.patch_in.data(), im.p(P, im.patch_w), d_ex.data(),
                       static_cast<Scalar*>(nullptr), im.p(G, im.patch_w), im.p(G, im.patch_b),
                       enc_rows, D, C);
        }
    }
};

// ---------------------------------------------------------------------------
// public entry points

template <typename Scalar>
double Net<Scalar>::train_step(const TokenBatch& batch, AdamState<Scalar>& opt,
                               const TrainHyper& hyper, int step, const NoiseSpec& noise) {
    if (batch.batch <= 0) throw Error(Error::Kind::contract, "empty batch");
    if (batch.seq_len != cfg_.max_caption_len)
        throw Error(Error::Kind::shape, "batch seq_len differs from max_caption_len");
    const size_t expect = static_cast<size_t>(batch.batch) * batch.seq_len;
    if (batch.inputs.size() != expect || batch.targets.size() != expect ||
        batch.images.size() != static_cast<size_t>(batch.batch))
        throw Error(Error::Kind::shape, "batch arrays inconsistent with batch size");
    if (opt.m.size() != params_.size()) throw Error(Error::Kind::shape, "optimizer shape mismatch");

    Pass<Scalar> pass(*this, *impl_, batch.batch);
    auto& ws = impl_->ws;

    // per-item noise replacement, keyed on (key, step, item)
    std::vector<const uint8_t*> images = batch.images;
    std::vector<std::vector<uint8_t>> noise_bufs;
    if (noise.prob > 0) {
        for (int b = 0; b < batch.batch; ++b) {
            Rng coin(derive_seed(noise.key, static_cast<uint64_t>(step), static_cast<uint64_t>(b)));
            if (coin.uniform() < noise.prob) {
                ImageBuffer n = white_noise_image(
                    cfg_.canvas_size, cfg_.canvas_size,
                    derive_seed(noise.key, static_cast<uint64_t>(step), static_cast<uint64_t>(b),
                                1u));
                noise_bufs.push_back(std::move(n.pixels));
                images[static_cast<size_t>(b)] = noise_bufs.back().data();
            }
        }
    }

    pass.load_images(images);
    std::copy(batch.inputs.begin(), batch.inputs.end(), ws.tokens.begin());
    for (int id : batch.inputs)
        if (id < 0 || id >= cfg_.vocab_size)
            throw Error(Error::Kind::contract, "token id out of vocabulary");

    pass.encoder_fwd();
    pass.decoder_fwd();
    const double loss = pass.loss_from_probs(batch.targets, /*prepare_backward=*/true);
    if (!std::isfinite(loss))
        throw Error(Error::Kind::diverged,
                    "non-finite loss at step " + std::to_string(step));

    std::fill(impl_->grads.begin(), impl_->grads.end(), Scalar(0));
    pass.backward();

    // AdamW with decoupled weight decay and bias correction.
    opt.step += 1;
    const double lr = lr_at_step(hyper, step);
    const Scalar b1c =
        static_cast<Scalar>(1.0 - std::pow(hyper.beta1, static_cast<double>(opt.step)));
    const Scalar b2c =
        static_cast<Scalar>(1.0 - std::pow(hyper.beta2, static_cast<double>(opt.step)));
    const Scalar beta1 = static_cast<Scalar>(hyper.beta1), beta2 = static_cast<Scalar>(hyper.beta2);
    const Eigen::Index n = static_cast<Eigen::Index>(params_.size());
    ArrMap<Scalar> p(params_.data(), n), m(opt.m.data(), n), v(opt.v.data(), n);
    CArrMap<Scalar> g(impl_->grads.data(), n);
    m = beta1 * m + (Scalar(1) - beta1) * g;
    v = beta2 * v + (Scalar(1) - beta2) * g.square();
    p -= static_cast<Scalar>(lr) *
         ((m / b1c) / ((v / b2c).sqrt() + static_cast<Scalar>(hyper.eps)) +
          static_cast<Scalar>(hyper.weight_decay) * p);
    return loss;
}

template <typename Scalar>
double Net<Scalar>::eval_loss(const TokenBatch& batch) {
    if (batch.batch <= 0) throw Error(Error::Kind::contract, "empty batch");
    Pass<Scalar> pass(*this, *impl_, batch.batch);
    pass.load_images(batch.images);
    std::copy(batch.inputs.begin(), batch.inputs.end(), impl_->ws.tokens.begin());
    pass.encoder_fwd();
    pass.decoder_fwd();
    return pass.loss_from_probs(batch.targets, /*prepare_backward=*/false);
}

template <typename Scalar>
std::vector<Scalar> Net<Scalar>::encode_image(const ImageBuffer& image) {
    if (image.width != cfg_.canvas_size || image.height != cfg_.canvas_size)
        throw Error(Error::Kind::shape, "image dimensions do not match the model canvas");
    Pass<Scalar> pass(*this, *impl_, 1);
    pass.load_images({image.pixels.data()});
    pass.encoder_fwd();
    const size_t n = static_cast<size_t>(cfg_.n_patches()) * cfg_.d_model;
    return std::vector<Scalar>(impl_->ws.memory.begin(), impl_->ws.memory.begin() + n);
}

template <typename Scalar>
std::vector<double> Net<Scalar>::score_captions(const std::vector<const uint8_t*>& images,
                                                const std::vector<std::vector<int>>& token_seqs,
                                                int seqs_per_image) {
    if (seqs_per_image < 1) throw Error(Error::Kind::contract, "seqs_per_image must be >= 1");
    if (images.size() * static_cast<size_t>(seqs_per_image) != token_seqs.size())
        throw Error(Error::Kind::contract, "caption count must be images * seqs_per_image");
    if (images.empty()) return {};
    const int B_img = static_cast<int>(images.size());
    const int B = static_cast<int>(token_seqs.size());
    const int T = cfg_.max_caption_len;

    Pass<Scalar> pass(*this, *impl_, B);
    auto& ws = impl_->ws;
    std::vector<int> targets(static_cast<size_t>(B) * T);
    for (int b = 0; b < B; ++b) {
        for (int id : token_seqs[static_cast<size_t>(b)])
            if (id < 0 || id >= cfg_.vocab_size)
                throw Error(Error::Kind::contract, "token id out of vocabulary");
        pack_sequence(token_seqs[static_cast<size_t>(b)], T,
                      ws.tokens.data() + static_cast<size_t>(b) * T,
                      targets.data() + static_cast<size_t>(b) * T);
    }
    pass.B = B_img;
    pass.load_images(images);
    pass.encoder_fwd();
    pass.expand_memory(B_img, seqs_per_image);
    pass.B = B;
    pass.decoder_fwd();

    std::vector<double> out(static_cast<size_t>(B), 0.0);
    for (int b = 0; b < B; ++b) {
        double lp = 0;
        for (int t = 0; t < T; ++t) {
            const int tgt = targets[static_cast<size_t>(b) * T + t];
            if (tgt == 0) break;
            const Scalar* pr = ws.probs.data() + (static_cast<size_t>(b) * T + t) * cfg_.vocab_size;
            lp += std::log(std::max(static_cast<double>(pr[tgt]),
                                    std::numeric_limits<double>::min()));
        }
        out[static_cast<size_t>(b)] = lp;
    }
    return out;
}

template <typename Scalar>
double Net<Scalar>::caption_logprob(const ImageBuffer& image, const std::vector<int>& token_ids) {
    if (image.width != cfg_.canvas_size || image.height != cfg_.canvas_size)
        throw Error(Error::Kind::shape, "image dimensions do not match the model canvas");
    return score_captions({image.pixels.data()}, {token_ids})[0];
}

template <typename Scalar>
std::vector<Scalar> Net<Scalar>::last_probs() const {
    const auto& ws = impl_->ws;
    const size_t n = static_cast<size_t>(ws.probs_rows) * cfg_.vocab_size;
    return std::vector<Scalar>(ws.probs.begin(), ws.probs.begin() + n);
}

template <typename Scalar>
double Net<Scalar>::loss_and_grad(const TokenBatch& batch) {
    if (batch.batch <= 0) throw Error(Error::Kind::contract, "empty batch");
    Pass<Scalar> pass(*this, *impl_, batch.batch);
    pass.load_images(batch.images);
    std::copy(batch.inputs.begin(), batch.inputs.end(), impl_->ws.tokens.begin());
    pass.encoder_fwd();
    pass.decoder_fwd();
    const double loss = pass.loss_from_probs(batch.targets, /*prepare_backward=*/true);
    std::fill(impl_->grads.begin(), impl_->grads.end(), Scalar(0));
    pass.backward();
    return loss;
}

template <typename Scalar>
std::span<const Scalar> Net<Scalar>::grads() const {
    return {impl_->grads.data(), impl_->grads.size()};
}

template <typename Scalar>
std::vector<int> Net<Scalar>::generate_caption(const ImageBuffer& image, int beam_width) {
    if (beam_width < 1) throw Error(Error::Kind::contract, "beam width must be >= 1");
    const int T = cfg_.max_caption_len, V = cfg_.vocab_size;

    struct Hyp {
        std::vector<int> ids;
        double logp = 0.0;
        bool finished = false;
        double norm() const {
            const size_t len = ids.size() + (finished ? 1 : 0);  // EOS counts toward length
            return logp / static_cast<double>(std::max<size_t>(len, 1));
        }
    };

    std::vector<Hyp> beams{{{}, 0.0, false}};
    for (int t = 0; t < T; ++t) {
        std::vector<Hyp*> open;
        for (auto& h : beams)
            if (!h.finished) open.push_back(&h);
        if (open.empty()) break;

        const int Bo = static_cast<int>(open.size());
        Pass<Scalar> pass(*this, *impl_, Bo);
        auto& ws = impl_->ws;
        for (int b = 0; b < Bo; ++b) {
            int* row = ws.tokens.data() + static_cast<size_t>(b) * T;
            row[0] = 1;  // BOS
            const auto& ids = open[static_cast<size_t>(b)]->ids;
            for (size_t i = 0; i < ids.size(); ++i) row[i + 1] = ids[i];
            for (size_t i = ids.size() + 1; i < static_cast<size_t>(T); ++i) row[i] = 0;
        }
        // all beams share the image: encode once, fan the memory out
        pass.B = 1;
        pass.load_images({image.pixels.data()});
        pass.encoder_fwd();
        pass.expand_memory(1, Bo);
        pass.B = Bo;
        pass.decoder_fwd();

        std::vector<Hyp> next;
        for (auto& h : beams)
            if (h.finished) next.push_back(h);
        for (int b = 0; b < Bo; ++b) {
            const Hyp& h = *open[static_cast<size_t>(b)];
            const int row = static_cast<int>(h.ids.size());
            const Scalar* pr = ws.probs.data() + (static_cast<size_t>(b) * T + row) * V;
            for (int v = 2; v < V; ++v) {  // PAD and BOS are never generated
                Hyp ext = h;
                ext.logp += std::log(std::max(static_cast<double>(pr[v]),
                                              std::numeric_limits<double>::min()));
                if (v == 2) {
                    ext.finished = true;
                } else {
                    ext.ids.push_back(v);
                    // a caption must still leave room for EOS
                    if (static_cast<int>(ext.ids.size()) >= T) continue;
                }
                next.push_back(std::move(ext));
            }
        }
        std::stable_sort(next.begin(), next.end(),
                         [](const Hyp& a, const Hyp& b) { return a.norm() > b.norm(); });
        if (static_cast<int>(next.size()) > beam_width) next.resize(static_cast<size_t>(beam_width));
        beams = std::move(next);
        bool all_done = true;
        for (const auto& h : beams) all_done &= h.finished;
        if (all_done) break;
    }

    const Hyp* best = nullptr;
    for (const auto& h : beams)
        if (h.finished && (!best || h.norm() > best->norm())) best = &h;
    if (!best) best = &beams.front();
    return best->ids;
}

// ---------------------------------------------------------------------------
// checkpoint serialization: little-endian header + manifest + raw arrays

namespace {

constexpr char kCkptMagic[8] = {'P', 'S', 'L', 'B', 'C', 'K', 'P', '1'};

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw Error(Error::Kind::checkpoint, "truncated checkpoint");
    return v;
}

template <typename S>
void put_array(std::ostream& out, const std::vector<S>& v) {
    put<uint64_t>(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(S)));
}

template <typename S>
std::vector<S> get_array(std::istream& in) {
    const uint64_t n = get<uint64_t>(in);
    std::vector<S> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(S)));
    if (!in) throw Error(Error::Kind::checkpoint, "truncated checkpoint array");
    return v;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ck, const std::vector<ParamInfo>& manifest,
                     const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Error::Kind::io, "cannot open checkpoint for write: " + path);
    out.write(kCkptMagic, 8);
    put<uint8_t>(out, sizeof(Scalar));
    put<int64_t>(out, ck.config.vocab_size);
    put<int64_t>(out, ck.config.d_model);
    put<int64_t>(out, ck.config.n_heads);
    put<int64_t>(out, ck.config.encoder_layers);
    put<int64_t>(out, ck.config.decoder_layers);
    put<int64_t>(out, ck.config.patch_size);
    put<int64_t>(out, ck.config.max_caption_len);
    put<int64_t>(out, ck.config.canvas_size);
    put<uint64_t>(out, ck.config.seed);

    put<uint64_t>(out, manifest.size());
    for (const auto& info : manifest) {
        put<uint32_t>(out, static_cast<uint32_t>(info.name.size()));
        out.write(info.name.data(), static_cast<std::streamsize>(info.name.size()));
        put<uint64_t>(out, info.offset);
        put<int64_t>(out, info.rows);
        put<int64_t>(out, info.cols);
    }
    put_array(out, ck.params);
    put_array(out, ck.opt_m);
    put_array(out, ck.opt_v);
    put<int64_t>(out, ck.opt_step);
    put<int64_t>(out, ck.trained_steps);
    for (uint64_t w : ck.rng_state) put<uint64_t>(out, w);
    if (!out) throw Error(Error::Kind::io, "checkpoint write failed: " + path);
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Error::Kind::io, "cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw Error(Error::Kind::checkpoint, "bad checkpoint magic/version tag");
    const uint8_t dtype = get<uint8_t>(in);
    if (dtype != sizeof(Scalar))
        throw Error(Error::Kind::checkpoint, "checkpoint dtype does not match this model");

    Checkpoint<Scalar> ck;
    ck.config.vocab_size = static_cast<int>(get<int64_t>(in));
    ck.config.d_model = static_cast<int>(get<int64_t>(in));
    ck.config.n_heads = static_cast<int>(get<int64_t>(in));
    ck.config.encoder_layers = static_cast<int>(get<int64_t>(in));
    ck.config.decoder_layers = static_cast<int>(get<int64_t>(in));
    ck.config.patch_size = static_cast<int>(get<int64_t>(in));
    ck.config.max_caption_len = static_cast<int>(get<int64_t>(in));
    ck.config.canvas_size = static_cast<int>(get<int64_t>(in));
    ck.config.seed = get<uint64_t>(in);

    const uint64_t n_tensors = get<uint64_t>(in);
    for (uint64_t i = 0; i < n_tensors; ++i) {
        const uint32_t len = get<uint32_t>(in);
        std::string name(len, '\0');
        in.read(name.data(), len);
        get<uint64_t>(in);  // offset
        get<int64_t>(in);   // rows
        get<int64_t>(in);   // cols
        if (!in) throw Error(Error::Kind::checkpoint, "truncated manifest");
    }
    ck.params = get_array<Scalar>(in);
    ck.opt_m = get_array<Scalar>(in);
    ck.opt_v = get_array<Scalar>(in);
    ck.opt_step = get<int64_t>(in);
    ck.trained_steps = get<int64_t>(in);
    for (auto& w : ck.rng_state) w = get<uint64_t>(in);
    return ck;
}

template class Net<float>;
template class Net<double>;
template void save_checkpoint<float>(const Checkpoint<float>&, const std::vector<ParamInfo>&,
                                     const std::string&);
template void save_checkpoint<double>(const Checkpoint<double>&, const std::vector<ParamInfo>&,
                                      const std::string&);
template Checkpoint<float> load_checkpoint<float>(const std::string&);
template Checkpoint<double> load_checkpoint<double>(const std::string&);

}  // namespace poslab
