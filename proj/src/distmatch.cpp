#include "opmatch/distmatch.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "opmatch/data.hpp"
#include "opmatch/oracle.hpp"

namespace opmatch::dm {

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) throw DistmatchError(msg);
}

Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& idx) {
    int64_t row = t.numel() / t.dim(0);
    Shape s = t.shape();
    s[0] = (int64_t)idx.size();
    std::vector<double> out((size_t)(row * (int64_t)idx.size()));
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(t.data().begin() + idx[i] * row, row,
                    out.begin() + (int64_t)i * row);
    return Tensor::from_data(s, std::move(out));
}

std::vector<int64_t> draw_batch(int64_t n, int64_t batch, Rng& rng) {
    std::vector<int64_t> idx((size_t)batch);
    for (auto& i : idx) i = rng.randint(n);
    return idx;
}

// Conditioning input for a (possibly coordinate-aware) velocity net over
// patches of the given spatial size.
std::optional<Tensor> make_cond(const flow::ArchDescriptor& arch,
                                const Tensor* coords, int64_t patch,
                                int64_t image_h, int64_t image_w) {
    if (arch.cond_channels == 0) return std::nullopt;
    check(coords != nullptr, "conditioned model needs patch coordinates");
    if (arch.kind == flow::ArchKind::Mlp) return *coords;
    check(image_h > 0 && image_w > 0,
          "coordinate channels need the image frame (image_h/image_w)");
    return data::coord_channels(*coords, patch, image_h, image_w);
}

// Crops m pixels off each spatial border (tape-aware no-op for m == 0).
Tensor crop_valid(const Tensor& y, int64_t m) {
    if (m <= 0) return y;
    int64_t H = y.dim(y.rank() - 2), W = y.dim(y.rank() - 1);
    check(2 * m < H && 2 * m < W,
          "match: valid_crop leaves no interior pixels");
    return crop2d(y, m, m, H - 2 * m, W - 2 * m);
}

bool finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// One Monte-Carlo term of the integrated-KL gradient at the given
// per-sample times, weighted by `weight` (quadrature weight or interval
// length). Accumulates into the grads of trainable operator params.
void accumulate_ikl_term(MatchState& state, const Tensor& x,
                         const Tensor* coords, const Tensor& tvec,
                         double weight, const MatchConfig& cfg, Rng& rng,
                         const ScoreOracle* oracle,
                         const std::optional<Tensor>& cond) {
    Tensor y1 = crop_valid(op::apply(state.oper, x, rng, coords),
                           cfg.valid_crop);
    Tensor y0 = Tensor::randn(y1.shape(), rng);
    int64_t B = y1.dim(0);
    std::vector<double> omt((size_t)B);
    for (int64_t b = 0; b < B; ++b) omt[(size_t)b] = 1.0 - tvec.data()[(size_t)b];
    Tensor yt = add(scale_rows(y0, Tensor::from_data({B}, omt)),
                    scale_rows(y1, tvec));
    Tensor yv = yt.detach();

    const Tensor* cptr = cond ? &*cond : nullptr;
    Tensor f_teacher, f_aux;  // scores (oracle eq4) or velocities
    if (oracle) {
        f_teacher = oracle->teacher(yv, tvec);
        f_aux = oracle->aux(yv, tvec);
    } else {
        f_teacher = state.teacher.forward(yv, tvec, cptr).detach();
        f_aux = state.aux.forward(yv, tvec, cptr).detach();
    }

    // The gradient of the integrated KL pairs the aux-minus-teacher score
    // difference with the operator's path sensitivity; in velocity mode the
    // t/(1-t) time weight of that difference is dropped.
    int64_t row = yv.numel() / B;
    std::vector<double> d((size_t)yv.numel());
    for (int64_t b = 0; b < B; ++b) {
        double t = tvec.data()[(size_t)b];
        double scale = 1.0;
        if (!oracle && cfg.time_weight == MatchConfig::TimeWeight::Eq4)
            scale = t / (1.0 - t);  // velocity difference -> score difference
        for (int64_t j = 0; j < row; ++j) {
            size_t i = (size_t)(b * row + j);
            d[i] = scale * (f_aux.data()[i] - f_teacher.data()[i]);
        }
    }
    Tensor dc = Tensor::from_data(yv.shape(), std::move(d));
    Tensor surrogate = scalar_mul(sum(mul(dc, yt)), weight / (double)B);
    backward(surrogate);
}

// Kernel views the regularizers act on: one materialized kernel, or every
// grid-node kernel for the spatially varying family.
std::vector<Tensor> reg_kernel_views(const op::ForwardOperator& o) {
    if (o.variant != op::Variant::KernelGrid)
        return {op::materialize_kernel(o)};
    std::vector<Tensor> ks;
    for (int64_t i = 0; i < o.grid_rows; ++i)
        for (int64_t j = 0; j < o.grid_cols; ++j) {
            double r = (double)i * (double)(o.image_h - 1) /
                       (double)(o.grid_rows - 1);
            double c = (double)j * (double)(o.image_w - 1) /
                       (double)(o.grid_cols - 1);
            ks.push_back(op::interpolate_kernels(o, r, c));
        }
    return ks;
}

struct RegValues {
    double center = 0, sparsity = 0, gaussian = 0, sum_to_one = 0;
};

// Adds the weighted regularizer gradient to the current op-param grads and
// reports the (unweighted) regularizer values.
RegValues apply_regularizers(op::ForwardOperator& o, const MatchConfig& cfg) {
    RegValues vals;
    bool any = cfg.w_center > 0 || cfg.w_sparsity > 0 || cfg.w_gaussian > 0 ||
               cfg.w_sum_to_one > 0;
    if (!any) return vals;
    auto kernels = reg_kernel_views(o);
    Tensor total = Tensor::scalar(0.0);
    for (const Tensor& k : kernels) {
        Tensor rc = op::reg_center(k), rs = op::reg_sparsity(k);
        Tensor rg = op::reg_gaussian(k), r1 = op::reg_sum_to_one(k);
        vals.center += rc.item();
        vals.sparsity += rs.item();
        vals.gaussian += rg.item();
        vals.sum_to_one += r1.item();
        Tensor term = add(add(scalar_mul(rc, cfg.w_center),
                              scalar_mul(rs, cfg.w_sparsity)),
                          add(scalar_mul(rg, cfg.w_gaussian),
                              scalar_mul(r1, cfg.w_sum_to_one)));
        total = add(total, term);
    }
    double inv = 1.0 / (double)kernels.size();
    backward(scalar_mul(total, inv));
    vals.center *= inv;
    vals.sparsity *= inv;
    vals.gaussian *= inv;
    vals.sum_to_one *= inv;
    return vals;
}

void validate(const MatchConfig& cfg) {
    check(cfg.lr_operator > 0 && cfg.lr_aux > 0,
          "match: learning rates must be positive");
    check(cfg.w_center >= 0 && cfg.w_sparsity >= 0 && cfg.w_gaussian >= 0 &&
              cfg.w_sum_to_one >= 0,
          "match: regularizer weights must be non-negative");
    check(cfg.batch > 0 && cfg.total_op_steps > 0 &&
              cfg.aux_steps_per_op_step >= 0 && cfg.mc_per_sample > 0,
          "match: counts must be positive");
    check(cfg.t_clamp > 0 && cfg.t_clamp < 0.5, "match: t_clamp out of range");
    check(cfg.valid_crop >= 0, "match: valid_crop must be non-negative");
    check(cfg.lr_operator_final >= 0 &&
              cfg.lr_operator_final <= cfg.lr_operator,
          "match: lr_operator_final must lie in [0, lr_operator]");
}

void abort_with_snapshot(const MatchState& st, const MatchConfig& cfg,
                         int64_t step, const std::string& what) {
    std::string note = what + " at step " + std::to_string(step);
    if (!cfg.csv_path.empty()) {
        std::filesystem::path p(cfg.csv_path);
        std::string prefix = (p.parent_path() / "abort_snapshot").string();
        st.oper.save(prefix);
        note += "; operator snapshot written to " + prefix;
    }
    throw DistmatchError("match: " + note);
}

}  // namespace

flow::VelocityField train_prior(const Tensor& patches, const Tensor* coords,
                                const PriorConfig& cfg,
                                std::vector<double>* loss_out) {
    check(patches.rank() >= 2 && patches.dim(0) > 0,
          "train_prior: empty dataset");
    check(cfg.arch.cond_channels == 0 || coords != nullptr,
          "train_prior: conditioned arch without coordinates");
    Rng rng(cfg.seed);
    flow::VelocityField model = flow::VelocityField::init(cfg.arch, rng);
    model.set_trainable(true);
    Adam opt;
    opt.lr = cfg.lr;
    int64_t N = patches.dim(0);
    int64_t patch = patches.rank() == 4 ? patches.dim(2) : 0;
    for (int64_t step = 0; step < cfg.steps; ++step) {
        auto idx = draw_batch(N, cfg.batch, rng);
        Tensor z1 = gather_rows(patches, idx);
        std::optional<Tensor> cond;
        if (cfg.arch.cond_channels > 0) {
            Tensor cb = data::dropout_coords(gather_rows(*coords, idx),
                                             cfg.coord_dropout, rng);
            cond = make_cond(cfg.arch, &cb, patch, cfg.image_h, cfg.image_w);
        }
        Tensor loss = flow::cfm_loss(model, z1, cond ? &*cond : nullptr, rng);
        check(std::isfinite(loss.item()), "train_prior: non-finite loss");
        if (loss_out) loss_out->push_back(loss.item());
        backward(loss);
        opt.step(model.params);
        flow::ema_update(model, cfg.ema_decay);
    }
    return model.with_ema_weights();
}

std::map<std::string, std::vector<double>> ikl_op_gradient(
    MatchState& state, const Tensor& x, const Tensor* coords,
    const MatchConfig& cfg, Rng& rng, const ScoreOracle* oracle) {
    check(x.rank() == 4, "ikl_op_gradient: clean batch must be [B,C,p,p]");
    for (auto& [name, p] : state.oper.params)
        if (p.requires_grad()) p.zero_grad();
    int64_t B = x.dim(0);
    int64_t out_patch = x.dim(2) / std::max<int64_t>(1, state.oper.scale) -
                        2 * cfg.valid_crop;
    std::optional<Tensor> cond;
    if (!oracle)
        cond = make_cond(state.teacher.arch, coords, out_patch, cfg.image_h,
                         cfg.image_w);
    double delta = cfg.t_clamp;
    if (cfg.quadrature_t > 0) {
        auto nodes = oracle::gauss_legendre((int)cfg.quadrature_t, delta,
                                            1.0 - delta);
        for (auto [tj, wj] : nodes) {
            Tensor tvec = Tensor::full({B}, tj);
            for (int64_t m = 0; m < cfg.mc_per_sample; ++m)
                accumulate_ikl_term(state, x, coords, tvec,
                                    wj / (double)cfg.mc_per_sample, cfg, rng,
                                    oracle, cond);
        }
    } else {
        double span = 1.0 - 2.0 * delta;
        for (int64_t m = 0; m < cfg.mc_per_sample; ++m) {
            std::vector<double> tv((size_t)B);
            for (auto& t : tv) t = rng.uniform(delta, 1.0 - delta);
            accumulate_ikl_term(state, x, coords, Tensor::from_data({B}, tv),
                                span / (double)cfg.mc_per_sample, cfg, rng,
                                oracle, cond);
        }
    }
    std::map<std::string, std::vector<double>> grads;
    for (auto& [name, p] : state.oper.params)
        if (p.requires_grad()) grads[name] = p.grad();
    return grads;
}

MatchState match(const MatchInputs& in, op::ForwardOperator op_init,
                 const MatchConfig& cfg) {
    validate(cfg);
    check(in.teacher != nullptr, "match: teacher required");
    check(in.clean.rank() == 4 && in.clean.dim(0) > 0,
          "match: clean set must be a non-empty [N,C,p,p] tensor");

    MatchState st;
    st.teacher = in.teacher->clone();
    st.teacher.set_trainable(false);
    st.aux = in.teacher->clone();  // pretrained init, EMA shadow included
    st.aux.set_trainable(true);
    st.oper = op_init.clone();
    st.oper.set_trainable(true);

    Adam aux_opt, op_opt;
    aux_opt.lr = cfg.lr_aux;
    op_opt.lr = cfg.lr_operator;
    Rng rng(cfg.seed);

    std::ofstream csv;
    if (!cfg.csv_path.empty()) {
        csv.open(cfg.csv_path);
        check(csv.good(), "match: cannot open csv log " + cfg.csv_path);
        csv << "step,aux_loss,op_grad_norm,reg_center,reg_sparsity,"
               "reg_gaussian,reg_sum_to_one,sigma\n";
    }
    if (!cfg.kernel_png_dir.empty())
        std::filesystem::create_directories(cfg.kernel_png_dir);

    int64_t N = in.clean.dim(0);
    int64_t out_patch = in.clean.dim(2) / std::max<int64_t>(1, st.oper.scale) -
                        2 * cfg.valid_crop;
    const bool conditioned = st.teacher.arch.cond_channels > 0;

    for (int64_t step = 0; step < cfg.total_op_steps; ++step) {
        double aux_loss = std::numeric_limits<double>::quiet_NaN();
        for (int64_t k = 0; k < cfg.aux_steps_per_op_step; ++k) {
            auto idx = draw_batch(N, cfg.batch, rng);
            Tensor xb = gather_rows(in.clean, idx);
            std::optional<Tensor> cb;
            if (in.clean_coords) cb = gather_rows(*in.clean_coords, idx);
            const Tensor* cptr = cb ? &*cb : nullptr;
            Tensor y = crop_valid(op::apply(st.oper, xb, rng, cptr),
                                  cfg.valid_crop)
                           .detach();
            std::optional<Tensor> cond;
            if (conditioned)
                cond = make_cond(st.teacher.arch, cptr, out_patch, cfg.image_h,
                                 cfg.image_w);
            Tensor loss =
                flow::cfm_loss(st.aux, y, cond ? &*cond : nullptr, rng);
            aux_loss = loss.item();
            if (!std::isfinite(aux_loss))
                abort_with_snapshot(st, cfg, step, "non-finite aux loss");
            backward(loss);
            aux_opt.step(st.aux.params);
        }
        st.loss_history.push_back(aux_loss);

        auto idx = draw_batch(N, cfg.batch, rng);
        Tensor xb = gather_rows(in.clean, idx);
        std::optional<Tensor> cb;
        if (in.clean_coords) cb = gather_rows(*in.clean_coords, idx);
        auto grads = ikl_op_gradient(st, xb, cb ? &*cb : nullptr, cfg, rng);
        double gsq = 0;
        for (const auto& [name, g] : grads)
            for (double v : g) gsq += v * v;
        RegValues regs = apply_regularizers(st.oper, cfg);
        if (cfg.lr_operator_final > 0 && cfg.total_op_steps > 1)
            op_opt.lr = cfg.lr_operator +
                        (cfg.lr_operator_final - cfg.lr_operator) *
                            (double)step / (double)(cfg.total_op_steps - 1);
        op_opt.step(st.oper.params);
        st.step = step + 1;

        for (const auto& [name, p] : st.oper.params)
            if (!finite(p.data()))
                abort_with_snapshot(st, cfg, step,
                                    "non-finite operator parameter " + name);

        if (csv.is_open())
            csv << step << ',' << std::setprecision(17) << aux_loss << ','
                << std::sqrt(gsq) << ',' << regs.center << ',' << regs.sparsity
                << ',' << regs.gaussian << ',' << regs.sum_to_one << ','
                << st.oper.sigma_value() << '\n';
        if (!cfg.kernel_png_dir.empty() && cfg.snapshot_every > 0 &&
            (step + 1) % cfg.snapshot_every == 0) {
            std::vector<Tensor> ks;
            for (const Tensor& k : reg_kernel_views(st.oper))
                ks.push_back(k.detach());
            std::ostringstream name;
            name << cfg.kernel_png_dir << "/kernels_" << std::setw(6)
                 << std::setfill('0') << (step + 1) << ".png";
            op::save_kernels_png(name.str(), ks,
                                 st.oper.variant == op::Variant::KernelGrid
                                     ? st.oper.grid_cols
                                     : (int64_t)ks.size());
        }
    }
    return st;
}

MatchState match_sr(const Tensor& image, int64_t scale, int64_t ksize,
                    int64_t patch, const PriorConfig& pcfg,
                    const MatchConfig& cfg) {
    check(image.rank() == 3, "match_sr: image must be [C,H,W]");
    check(scale >= 2, "match_sr: scale must be at least 2");
    // Matching the image's own patch distribution across one extra
    // downscale: targets are p-sized patches of the image, inputs are
    // (scale*p)-sized patches of the same image.
    data::PatchBatch lo = data::extract_patches(image, patch, 2, false);
    data::PatchBatch hi =
        data::extract_patches(image, scale * patch, 2, false);
    check(lo.pixels.dim(0) >= 500 && hi.pixels.dim(0) >= 500,
          "match_sr: image too small (need at least 500 patches per scale)");

    PriorConfig pc = pcfg;
    pc.arch.cond_channels = 0;
    pc.arch.data_channels = image.dim(0);
    flow::VelocityField teacher = train_prior(lo.pixels, nullptr, pc);

    // softened dirac: an exact dirac is a stationary point of the kernel
    // gradient under abs + sum-to-one normalization
    int64_t C = image.dim(0);
    std::vector<double> raw((size_t)(C * ksize * ksize), 0.01);
    for (int64_t c = 0; c < C; ++c)
        raw[(size_t)(c * ksize * ksize + (ksize / 2) * ksize + ksize / 2)] = 1.0;
    op::ForwardOperator op_init = op::ForwardOperator::downscale(
        Tensor::from_data({C, ksize, ksize}, std::move(raw)), scale,
        op::Normalization::HardSumToOne, 0.0, false);

    MatchInputs in;
    in.teacher = &teacher;
    in.clean = hi.pixels;
    return match(in, op_init, cfg);
}

}  // namespace opmatch::dm
