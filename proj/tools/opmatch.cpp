#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "opmatch/config.hpp"
#include "opmatch/data.hpp"
#include "opmatch/distmatch.hpp"
#include "opmatch/metrics.hpp"
#include "opmatch/oracle.hpp"
#include "opmatch/restore.hpp"

extern "C" void openblas_set_num_threads(int);

namespace fs = std::filesystem;
using namespace opmatch;

namespace {

constexpr const char* kVersion = "opmatch 0.1.0";

// Missing input artifact (as opposed to a malformed config): exit code 4.
struct PrereqError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Run {
    cfg::Ini ini;
    uint64_t seed = 0;
    fs::path out;
};

Run load_run(const std::string& config_path, int64_t seed_override,
             const std::string& out_override) {
    Run r;
    r.ini = cfg::Ini::parse_file(config_path);
    if (seed_override >= 0)
        r.seed = (uint64_t)seed_override;
    else
        r.seed = (uint64_t)r.ini.get_int("run", "seed");
    std::string out = !out_override.empty()
                          ? out_override
                          : r.ini.get_or("run", "out_dir", "out");
    r.out = out;
    fs::create_directories(r.out);
    return r;
}

// Every key any command understands. Touching them up front makes
// require_all_consumed() reject misspellings before any computation runs.
void touch_known_keys(const cfg::Ini& ini) {
    static const std::pair<const char*, const char*> known[] = {
        {"run", "seed"}, {"run", "out_dir"},
        {"corpus", "synth_images"}, {"corpus", "synth_size"},
        {"corpus", "clean_sources"}, {"corpus", "corrupted_sources"},
        {"corpus", "patch_size"}, {"corpus", "stride"},
        {"corpus", "truth_kind"}, {"corpus", "truth_ksize"},
        {"corpus", "truth_noise"}, {"corpus", "truth_prefix"},
        {"corpus", "truth_kernel_sigma"}, {"corpus", "truth_kernel_sigma_x"},
        {"corpus", "truth_kernel_theta"}, {"corpus", "truth_motion_steps"},
        {"prior", "arch"}, {"prior", "data_channels"},
        {"prior", "cond_channels"}, {"prior", "hidden"}, {"prior", "depth"},
        {"prior", "kernel_size"}, {"prior", "time_embed"}, {"prior", "steps"},
        {"prior", "center_crop"},
        {"prior", "batch"}, {"prior", "lr"}, {"prior", "ema_decay"},
        {"prior", "coord_dropout"},
        {"match", "variant"}, {"match", "ksize"}, {"match", "grid_rows"},
        {"match", "grid_cols"}, {"match", "lr_operator"}, {"match", "lr_aux"},
        {"match", "batch"}, {"match", "aux_steps"}, {"match", "op_steps"},
        {"match", "w_center"}, {"match", "w_sparsity"},
        {"match", "w_gaussian"}, {"match", "w_sum_to_one"},
        {"match", "time_weight"}, {"match", "mc_per_sample"},
        {"match", "noise_sigma"}, {"match", "noise_trainable"},
        {"match", "snapshot_every"}, {"match", "input"}, {"match", "scale"},
        {"match", "patch_size"}, {"match", "init_soft"},
        {"match", "valid_crop"}, {"match", "lr_operator_final"},
        {"restore", "operator"}, {"restore", "solver"},
        {"restore", "tv_weight"}, {"restore", "iterations"},
        {"restore", "step_size"}, {"restore", "noise_sigma"},
        {"restore", "tile"}, {"restore", "overlap"}, {"restore", "input"},
        {"metrics", "restored"}, {"metrics", "reference"},
        {"metrics", "learned_op"}, {"metrics", "true_op"},
    };
    for (const auto& [sec, key] : known) ini.has(sec, key);
    ini.require_all_consumed();
}

void write_provenance(const Run& r, const std::string& command) {
    std::ofstream f(r.out / ("provenance_" + command + ".txt"));
    f << "tool: " << kVersion << "\n"
      << "command: " << command << "\n"
      << "seed: " << r.seed << "\n"
      << "config_hash: " << std::hex << std::setw(16) << std::setfill('0')
      << r.ini.hash() << "\n";
}

void require_artifact(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p))
        throw PrereqError("missing prerequisite '" + p.string() +
                          "'; run `opmatch " + producer + "` first");
}

Tensor gaussian_kernel(int64_t n, double sy, double sx, double theta = 0.0) {
    Tensor k = Tensor::zeros({1, n, n});
    double c = (double)(n - 1) / 2.0, s = 0;
    for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
            double dy = (double)y - c, dx = (double)x - c;
            double ry = std::cos(theta) * dy - std::sin(theta) * dx;
            double rx = std::sin(theta) * dy + std::cos(theta) * dx;
            double v =
                std::exp(-ry * ry / (2 * sy * sy) - rx * rx / (2 * sx * sx));
            k.mutable_data()[(size_t)(y * n + x)] = v;
            s += v;
        }
    for (auto& v : k.mutable_data()) v /= s;
    return k;
}

op::ForwardOperator truth_from_config(const Run& r, Rng& rng) {
    const auto& ini = r.ini;
    std::string kind = ini.get_or("corpus", "truth_kind", "gaussian");
    double noise = ini.get_real_or("corpus", "truth_noise", 0.0);
    int64_t ksize = ini.get_int_or("corpus", "truth_ksize", 7);
    if (kind == "load")
        return op::ForwardOperator::load(ini.get("corpus", "truth_prefix"));
    if (kind == "dirac")
        return op::ForwardOperator::dirac_uniform(
            1, ksize, op::Normalization::HardSumToOne, noise, false);
    if (kind == "gaussian") {
        double sy = ini.get_real_or("corpus", "truth_kernel_sigma", 1.0);
        double sx = ini.get_real_or("corpus", "truth_kernel_sigma_x", sy);
        double th = ini.get_real_or("corpus", "truth_kernel_theta", 0.0);
        return op::ForwardOperator::uniform(gaussian_kernel(ksize, sy, sx, th),
                                            op::Normalization::HardSumToOne,
                                            noise, false);
    }
    if (kind == "motion") {
        int64_t steps = ini.get_int_or("corpus", "truth_motion_steps", 20);
        Tensor k = data::random_motion_kernel(ksize, steps, rng);
        return op::ForwardOperator::uniform(
            reshape(k, {1, ksize, ksize}), op::Normalization::HardSumToOne,
            noise, false);
    }
    throw cfg::ConfigError("corpus.truth_kind: unknown value '" + kind + "'");
}

int cmd_generate(const Run& r) {
    data::CorpusSpec spec;
    spec.out_dir = (r.out / "corpus").string();
    spec.patch_size = r.ini.get_int_or("corpus", "patch_size", 32);
    spec.stride = r.ini.get_int_or("corpus", "stride", 32);
    spec.seed = r.seed;
    Rng rng(r.seed);

    if (r.ini.has("corpus", "synth_images")) {
        int64_t n = r.ini.get_int("corpus", "synth_images");
        int64_t size = r.ini.get_int_or("corpus", "synth_size", 64);
        if (n < 2) throw cfg::ConfigError("corpus.synth_images must be >= 2");
        fs::path src = r.out / "sources";
        fs::create_directories(src);
        for (int64_t i = 0; i < n; ++i) {
            std::string p =
                (src / ("img_" + std::to_string(i) + ".png")).string();
            data::save_image(p, data::synth_texture(size, size, rng), 16);
            (i < n / 2 ? spec.clean_sources : spec.corrupted_sources)
                .push_back(p);
        }
    } else {
        for (const auto& p : r.ini.get_list("corpus", "clean_sources"))
            spec.clean_sources.push_back(p);
        for (const auto& p : r.ini.get_list("corpus", "corrupted_sources"))
            spec.corrupted_sources.push_back(p);
        for (const auto& p : spec.clean_sources)
            require_artifact(p, "generate (provide source images)");
        for (const auto& p : spec.corrupted_sources)
            require_artifact(p, "generate (provide source images)");
    }
    op::ForwardOperator truth = truth_from_config(r, rng);
    data::generate_corpus(spec, truth);
    std::cout << "corpus written to " << spec.out_dir << "\n";
    return 0;
}

flow::ArchDescriptor arch_from_config(const cfg::Ini& ini) {
    flow::ArchDescriptor a;
    std::string kind = ini.get_or("prior", "arch", "conv");
    if (kind == "conv")
        a.kind = flow::ArchKind::ConvResnet;
    else if (kind == "mlp")
        a.kind = flow::ArchKind::Mlp;
    else
        throw cfg::ConfigError("prior.arch: unknown value '" + kind + "'");
    a.data_channels = ini.get_int_or("prior", "data_channels", 1);
    a.cond_channels = ini.get_int_or("prior", "cond_channels", 0);
    a.hidden = ini.get_int_or("prior", "hidden", 32);
    a.depth = ini.get_int_or("prior", "depth", 2);
    a.kernel_size = ini.get_int_or("prior", "kernel_size", 3);
    a.time_embed = ini.get_int_or("prior", "time_embed", 16);
    return a;
}

dm::PriorConfig prior_from_config(const Run& r) {
    dm::PriorConfig pc;
    pc.arch = arch_from_config(r.ini);
    pc.steps = r.ini.get_int_or("prior", "steps", 2000);
    pc.batch = r.ini.get_int_or("prior", "batch", 64);
    pc.lr = r.ini.get_real_or("prior", "lr", 1e-4);
    pc.ema_decay = r.ini.get_real_or("prior", "ema_decay", 0.995);
    pc.coord_dropout = r.ini.get_real_or("prior", "coord_dropout", 0.2);
    pc.seed = r.seed;
    return pc;
}

int cmd_train_prior(const Run& r) {
    fs::path corpus_dir = r.out / "corpus";
    require_artifact(corpus_dir / "manifest.json", "generate");
    data::Corpus corpus = data::load_corpus(corpus_dir.string());
    dm::PriorConfig pc = prior_from_config(r);
    pc.image_h = corpus.image_h;
    pc.image_w = corpus.image_w;
    // Train on center crops when the matching stage will compare only the
    // padding-free interior of the operator output (match.valid_crop).
    int64_t cc = r.ini.get_int_or("prior", "center_crop", 0);
    if (cc > 0) {
        int64_t p = corpus.corrupted.dim(2);
        corpus.corrupted =
            crop2d(corpus.corrupted, cc, cc, p - 2 * cc, p - 2 * cc).detach();
    }
    std::vector<double> losses;
    flow::VelocityField teacher = dm::train_prior(
        corpus.corrupted,
        pc.arch.cond_channels > 0 ? &corpus.corrupted_coords : nullptr, pc,
        &losses);
    teacher.save((r.out / "teacher").string());
    std::ofstream csv(r.out / "prior_loss.csv");
    csv << "step,cfm_loss\n" << std::setprecision(17);
    for (size_t i = 0; i < losses.size(); ++i)
        csv << i << ',' << losses[i] << '\n';
    std::cout << "teacher written to " << (r.out / "teacher").string()
              << ".{opma,json}\n";
    return 0;
}

dm::MatchConfig match_from_config(const Run& r) {
    dm::MatchConfig mc;
    mc.lr_operator = r.ini.get_real_or("match", "lr_operator", 1e-3);
    mc.lr_operator_final =
        r.ini.get_real_or("match", "lr_operator_final", 0.0);
    mc.lr_aux = r.ini.get_real_or("match", "lr_aux", 1e-5);
    mc.batch = r.ini.get_int_or("match", "batch", 32);
    mc.aux_steps_per_op_step = r.ini.get_int_or("match", "aux_steps", 1);
    mc.total_op_steps = r.ini.get_int_or("match", "op_steps", 500);
    mc.w_center = r.ini.get_real_or("match", "w_center", 0.0);
    mc.w_sparsity = r.ini.get_real_or("match", "w_sparsity", 0.0);
    mc.w_gaussian = r.ini.get_real_or("match", "w_gaussian", 0.0);
    mc.w_sum_to_one = r.ini.get_real_or("match", "w_sum_to_one", 0.0);
    mc.mc_per_sample = r.ini.get_int_or("match", "mc_per_sample", 1);
    std::string tw = r.ini.get_or("match", "time_weight", "velocity");
    if (tw == "velocity")
        mc.time_weight = dm::MatchConfig::TimeWeight::Velocity;
    else if (tw == "eq4")
        mc.time_weight = dm::MatchConfig::TimeWeight::Eq4;
    else
        throw cfg::ConfigError("match.time_weight: unknown value '" + tw +
                               "'");
    mc.seed = r.seed;
    mc.valid_crop = r.ini.get_int_or("match", "valid_crop", 0);
    mc.snapshot_every = r.ini.get_int_or("match", "snapshot_every", 0);
    return mc;
}

op::ForwardOperator op_init_from_config(const Run& r, int64_t channels,
                                        int64_t image_h, int64_t image_w) {
    std::string variant = r.ini.get_or("match", "variant", "uniform");
    int64_t ksize = r.ini.get_int_or("match", "ksize", 11);
    double sigma = r.ini.get_real_or("match", "noise_sigma", 0.0);
    bool train_sigma = r.ini.get_bool_or("match", "noise_trainable", false);
    // an exact dirac is a stationary point of the kernel gradient; start
    // learning from a softened one
    double soft = r.ini.get_real_or("match", "init_soft", 0.01);
    if (variant == "uniform")
        return op::ForwardOperator::dirac_uniform(
            channels, ksize, op::Normalization::HardSumToOne, sigma,
            train_sigma, soft);
    if (variant == "grid")
        return op::ForwardOperator::kernel_grid(
            r.ini.get_int_or("match", "grid_rows", 4),
            r.ini.get_int_or("match", "grid_cols", 4), channels, ksize,
            image_h, image_w, op::Normalization::HardSumToOne, sigma,
            train_sigma, soft);
    if (variant == "conv_net")
        return op::ForwardOperator::linear_conv_net(sigma, train_sigma);
    throw cfg::ConfigError("match.variant: unknown value '" + variant + "'");
}

int cmd_match(const Run& r) {
    fs::path corpus_dir = r.out / "corpus";
    require_artifact(corpus_dir / "manifest.json", "generate");
    require_artifact(r.out / "teacher.opma", "train-prior");
    data::Corpus corpus = data::load_corpus(corpus_dir.string());
    flow::VelocityField teacher =
        flow::VelocityField::load((r.out / "teacher").string());

    dm::MatchConfig mc = match_from_config(r);
    mc.image_h = corpus.image_h;
    mc.image_w = corpus.image_w;
    mc.csv_path = (r.out / "match_log.csv").string();
    if (mc.snapshot_every > 0)
        mc.kernel_png_dir = (r.out / "kernel_snapshots").string();

    int64_t channels = corpus.clean.dim(1);
    op::ForwardOperator op_init =
        op_init_from_config(r, channels, corpus.image_h, corpus.image_w);

    dm::MatchInputs in;
    in.teacher = &teacher;
    in.clean = corpus.clean;
    in.clean_coords = corpus.clean_coords;
    dm::MatchState st = dm::match(in, op_init, mc);

    st.oper.save((r.out / "learned_op").string());
    std::vector<Tensor> kernels;
    if (st.oper.variant == op::Variant::KernelGrid) {
        for (int64_t i = 0; i < st.oper.grid_rows; ++i)
            for (int64_t j = 0; j < st.oper.grid_cols; ++j)
                kernels.push_back(
                    op::interpolate_kernels(
                        st.oper,
                        (double)i * (corpus.image_h - 1) /
                            (st.oper.grid_rows - 1),
                        (double)j * (corpus.image_w - 1) /
                            (st.oper.grid_cols - 1))
                        .detach());
    } else {
        kernels.push_back(op::materialize_kernel(st.oper).detach());
    }
    op::save_kernels_png((r.out / "learned_kernel.png").string(), kernels,
                         st.oper.variant == op::Variant::KernelGrid
                             ? st.oper.grid_cols
                             : (int64_t)kernels.size());
    std::cout << "learned operator written to "
              << (r.out / "learned_op").string() << ".{opma,json}\n";
    return 0;
}

int cmd_match_sr(const Run& r) {
    std::string input = r.ini.get("match", "input");
    require_artifact(input, "match-sr (provide the low-resolution image)");
    Tensor image = data::load_image(input);
    int64_t scale = r.ini.get_int_or("match", "scale", 2);
    int64_t ksize = r.ini.get_int_or("match", "ksize", 11);
    int64_t patch = r.ini.get_int_or("match", "patch_size", 8);

    dm::PriorConfig pc = prior_from_config(r);
    dm::MatchConfig mc = match_from_config(r);
    mc.csv_path = (r.out / "match_log.csv").string();
    dm::MatchState st = dm::match_sr(image, scale, ksize, patch, pc, mc);
    st.oper.save((r.out / "learned_op").string());
    op::save_kernels_png((r.out / "learned_kernel.png").string(),
                         {op::materialize_kernel(st.oper).detach()}, 1);
    std::cout << "learned downscale operator written to "
              << (r.out / "learned_op").string() << ".{opma,json}\n";
    return 0;
}

int cmd_restore(const Run& r) {
    std::string op_prefix =
        r.ini.get_or("restore", "operator", (r.out / "learned_op").string());
    require_artifact(op_prefix + ".opma", "match");
    op::ForwardOperator oper = op::ForwardOperator::load(op_prefix);

    restore::RestoreConfig rc;
    std::string solver = r.ini.get_or("restore", "solver", "map_tv");
    if (solver == "wiener")
        rc.solver = restore::Solver::Wiener;
    else if (solver == "map_tv")
        rc.solver = restore::Solver::MapTv;
    else
        throw cfg::ConfigError("restore.solver: unknown value '" + solver +
                               "'");
    rc.tv_weight = r.ini.get_real_or("restore", "tv_weight", 1e-3);
    rc.iterations = r.ini.get_int_or("restore", "iterations", 200);
    rc.step_size = r.ini.get_real_or("restore", "step_size", 1e-2);
    rc.noise_sigma = r.ini.get_real_or("restore", "noise_sigma", -1.0);
    int64_t tile = r.ini.get_int_or("restore", "tile", 64);
    int64_t overlap = r.ini.get_int_or("restore", "overlap", 8);

    std::string input = r.ini.get("restore", "input");
    require_artifact(input, "restore (provide the degraded image)");
    fs::path out_dir = r.out / "restored";
    fs::create_directories(out_dir);

    std::vector<fs::path> inputs;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input))
            if (e.path().extension() == ".png" ||
                e.path().extension() == ".pgm")
                inputs.push_back(e.path());
        std::sort(inputs.begin(), inputs.end());
    } else {
        inputs.push_back(input);
    }
    for (const auto& p : inputs) {
        Tensor y = data::load_image(p.string());
        Tensor x = restore::restore_tiles(y, oper, rc, tile, overlap);
        std::string out = (out_dir / p.filename()).string();
        data::save_image(out, x, 16);
        std::cout << "restored " << p.string() << " -> " << out << "\n";
    }
    return 0;
}

int cmd_evaluate(const Run& r) {
    std::ofstream csv(r.out / "evaluation.csv");
    csv << "metric,value\n" << std::setprecision(10);
    if (r.ini.has("metrics", "restored")) {
        std::string rp = r.ini.get("metrics", "restored");
        std::string gp = r.ini.get("metrics", "reference");
        require_artifact(rp, "restore");
        require_artifact(gp, "restore (provide the reference image)");
        Tensor a = data::load_image(rp), b = data::load_image(gp);
        csv << "psnr," << metrics::psnr(a, b) << "\n";
        csv << "y_psnr," << metrics::y_psnr(a, b) << "\n";
        csv << "ssim," << metrics::ssim(a, b) << "\n";
    }
    if (r.ini.has("metrics", "learned_op")) {
        std::string lp = r.ini.get("metrics", "learned_op");
        std::string tp = r.ini.get("metrics", "true_op");
        require_artifact(lp + ".opma", "match");
        require_artifact(tp + ".opma", "generate");
        op::ForwardOperator learned = op::ForwardOperator::load(lp);
        op::ForwardOperator truth = op::ForwardOperator::load(tp);
        auto center = [](const op::ForwardOperator& o)
            -> std::optional<std::pair<double, double>> {
            if (o.variant != op::Variant::KernelGrid) return std::nullopt;
            return std::pair<double, double>{(double)(o.image_h - 1) / 2.0,
                                             (double)(o.image_w - 1) / 2.0};
        };
        Tensor kl = op::materialize_kernel(learned, center(learned)).detach();
        Tensor kt = op::materialize_kernel(truth, center(truth)).detach();
        auto ncc = metrics::kernel_ncc(kl, kt);
        csv << "kernel_ncc," << ncc.ncc << "\n";
        csv << "kernel_psnr," << metrics::kernel_psnr(kl, kt) << "\n";
        csv << "sigma_learned," << learned.sigma_value() << "\n";
        csv << "sigma_true," << truth.sigma_value() << "\n";
    }
    std::cout << "evaluation written to " << (r.out / "evaluation.csv").string()
              << "\n";
    return 0;
}

// Ring-kernel correlation up to cyclic shift and flip, for the circulant
// identification check.
double ring_ncc(const oracle::Vec& a, const oracle::Vec& b) {
    int d = (int)a.size();
    auto pearson = [&](const oracle::Vec& u, const oracle::Vec& v) {
        double mu = u.mean(), mv = v.mean(), num = 0, du = 0, dv = 0;
        for (int i = 0; i < d; ++i) {
            num += (u[i] - mu) * (v[i] - mv);
            du += (u[i] - mu) * (u[i] - mu);
            dv += (v[i] - mv) * (v[i] - mv);
        }
        return du > 0 && dv > 0 ? num / std::sqrt(du * dv) : 0.0;
    };
    double best = -1;
    for (int flip = 0; flip < 2; ++flip)
        for (int s = 0; s < d; ++s) {
            oracle::Vec c(d);
            for (int i = 0; i < d; ++i)
                c[(i + s) % d] = flip ? a[(d - i) % d] : a[i];
            best = std::max(best, pearson(c, b));
        }
    return best;
}

int cmd_oracle(const Run& r) {
    int64_t seed = (int64_t)r.seed;
    std::ofstream report(r.out / "oracle_report.csv");
    bool all_ok = true;
    auto emit = [&](const std::string& name, bool ok, double value) {
        all_ok = all_ok && ok;
        std::ostringstream line;
        line << name << ',' << (ok ? "pass" : "FAIL") << ','
             << std::setprecision(6) << value;
        std::cout << line.str() << "\n";
        report << line.str() << "\n";
    };
    Rng rng((uint64_t)seed);

    {  // distribution equality is invariant under right rotations of A
        int d = 4;
        oracle::Mat A = oracle::Mat::Random(d, d);
        oracle::Mat I = oracle::Mat::Identity(d, d);
        oracle::GaussianModel base = oracle::pushforward(A, I, 0.3);
        double worst = 0;
        for (int t = 0; t < 20; ++t) {
            oracle::Mat Q = oracle::random_orthogonal(d, rng);
            double v = oracle::ikl_exact(oracle::pushforward(A * Q, I, 0.3),
                                         base);
            worst = std::max(worst, std::abs(v));
        }
        emit("rotation_invariance", worst < 1e-8, worst);
    }
    {  // construct-then-recover alignment
        int d = 4;
        oracle::Mat A = oracle::Mat::Random(d, d);
        oracle::Mat S = oracle::Mat::Random(d, d);
        oracle::Mat Sigma = S * S.transpose() + oracle::Mat::Identity(d, d);
        oracle::Mat Q = oracle::random_orthogonal(d, rng);
        oracle::Mat sq = oracle::matrix_sqrt_spd(Sigma);
        oracle::Mat Aw = A * sq * Q * sq.inverse();
        auto res = oracle::align_up_to_rotation(Aw, A, Sigma);
        emit("procrustes_recovery", res.residual < 1e-8, res.residual);
    }
    {  // circulant identification of the (0.25, 0.5, 0.25) ring kernel
        int d = 8;
        oracle::Vec k = oracle::Vec::Zero(d);
        k[0] = 0.5;
        k[1] = 0.25;
        k[d - 1] = 0.25;
        oracle::Mat C = oracle::circulant_from_kernel(k, d);
        double sigma = 0.05;
        oracle::Mat Sy = C * C.transpose() +
                         sigma * sigma * oracle::Mat::Identity(d, d);
        auto id = oracle::identify_from_covariance(
            Sy, oracle::Mat::Identity(d, d), sigma);
        double ncc = ring_ncc(id.kernel, k);
        emit("circulant_identification", ncc > 1.0 - 1e-9, ncc);
    }
    {  // Monte-Carlo vs trace moment identity
        bool ok = true;
        double worst = 0;
        for (int t = 0; t < 20; ++t) {
            int d = 3;
            oracle::Mat Aw = oracle::Mat::Random(d, d);
            oracle::Mat As = oracle::Mat::Random(d, d);
            oracle::Mat S = oracle::Mat::Random(d, d);
            oracle::Mat Sigma =
                S * S.transpose() + oracle::Mat::Identity(d, d);
            oracle::Mat Cq = oracle::Mat::Random(d, d);
            Cq = (Cq + Cq.transpose()).eval();
            auto rep = oracle::verify_moment_identity(Aw, As, Sigma, Cq, 0.2,
                                                      20000, rng);
            double dev = rep.std_err > 0 ? std::abs(rep.mc_value -
                                                    rep.exact_value) /
                                               rep.std_err
                                         : 0.0;
            worst = std::max(worst, dev);
            ok = ok && rep.consistent();
        }
        emit("moment_identity", ok, worst);
    }
    {  // integrated-KL gradient vs quadrature finite differences
        const double sig = 0.25, astar = 1.0, h = 1e-4;
        bool ok = true;
        double worst = 0;
        for (int d : {1, 2}) {
            for (double a : {0.5, 1.5}) {
                oracle::Mat I = oracle::Mat::Identity(d, d);
                auto ikl = [&](double aa) {
                    return oracle::ikl_exact(
                        oracle::pushforward(aa * I, I, sig),
                        oracle::pushforward(astar * I, I, sig));
                };
                double fd = (ikl(a + h) - ikl(a - h)) / (2 * h);

                dm::MatchState st;
                st.oper = op::ForwardOperator::uniform(
                    Tensor::from_data({1, 1, 1}, {a}),
                    op::Normalization::None, sig, false);
                st.oper.set_trainable(true);
                auto score = [sig](double amp) {
                    return [amp, sig](const Tensor& y, const Tensor& t) {
                        int64_t B = t.dim(0), row = y.numel() / B;
                        std::vector<double> out((size_t)y.numel());
                        for (int64_t b = 0; b < B; ++b) {
                            double tt = t.data()[(size_t)b];
                            double var = tt * tt * (amp * amp + sig * sig) +
                                         (1 - tt) * (1 - tt);
                            for (int64_t j = 0; j < row; ++j)
                                out[(size_t)(b * row + j)] =
                                    -y.data()[(size_t)(b * row + j)] / var;
                        }
                        return Tensor::from_data(y.shape(), std::move(out));
                    };
                };
                dm::ScoreOracle so;
                so.aux = score(a);
                so.teacher = score(astar);
                dm::MatchConfig mc;
                mc.time_weight = dm::MatchConfig::TimeWeight::Eq4;
                mc.quadrature_t = 32;
                mc.mc_per_sample = 16;
                Rng gr((uint64_t)(seed + 100 * d + (int)(10 * a)));
                Rng xr((uint64_t)(seed + 7 + d));
                Tensor x = Tensor::randn({40000 / d, 1, 1, d}, xr);
                double g =
                    dm::ikl_op_gradient(st, x, nullptr, mc, gr, &so)
                        .at("kernel")[0];
                double rel = std::abs(g - fd) / std::abs(fd);
                worst = std::max(worst, rel);
                ok = ok && rel < 0.02;
            }
        }
        emit("ikl_gradient_fd", ok, worst);
    }
    return all_ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    openblas_set_num_threads(1);  // determinism over throughput
    CLI::App app{"Unpaired degradation-operator learning pipeline"};
    app.require_subcommand(1);
    app.fallthrough();  // accept global flags after the subcommand name

    std::string config_path, out_override;
    int64_t seed_override = -1;
    app.add_option("--config", config_path, "Run configuration (INI)")
        ->required();
    app.add_option("--seed", seed_override, "Override [run] seed");
    app.add_option("--out", out_override, "Override [run] out_dir");

    auto* generate = app.add_subcommand("generate", "Build the patch corpus");
    auto* train = app.add_subcommand("train-prior", "Train the teacher CFM");
    auto* match_cmd =
        app.add_subcommand("match", "Learn the operator by matching");
    auto* match_sr_cmd = app.add_subcommand(
        "match-sr", "Learn an SR downscale kernel from one image");
    auto* restore_cmd =
        app.add_subcommand("restore", "Non-blind restoration");
    auto* evaluate = app.add_subcommand("evaluate", "Write the metric report");
    auto* oracle_cmd = app.add_subcommand(
        "oracle", "Closed-form Gaussian verification battery");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        Run r = load_run(config_path, seed_override, out_override);
        touch_known_keys(r.ini);
        int rc = 1;
        std::string name;
        if (generate->parsed()) rc = cmd_generate(r), name = "generate";
        if (train->parsed()) rc = cmd_train_prior(r), name = "train-prior";
        if (match_cmd->parsed()) rc = cmd_match(r), name = "match";
        if (match_sr_cmd->parsed()) rc = cmd_match_sr(r), name = "match-sr";
        if (restore_cmd->parsed()) rc = cmd_restore(r), name = "restore";
        if (evaluate->parsed()) rc = cmd_evaluate(r), name = "evaluate";
        if (oracle_cmd->parsed()) rc = cmd_oracle(r), name = "oracle";
        write_provenance(r, name);
        return rc;
    } catch (const cfg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const PrereqError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
