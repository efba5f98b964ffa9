// SPDX-License-Identifier: Apache-2.0
// kvedit: command-line front end for the background-preserving editor.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kvedit/kvedit.hpp"

namespace fs = std::filesystem;
using namespace kvedit;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Options {
    std::string command;
    std::string precision = "f32";
    std::uint64_t seed = 0;
    std::string out = "out";

    // model / training
    std::size_t layers = 4, dim = 64, heads = 4;
    std::size_t train_steps = 2000, batch = 16;
    double lr = 1e-3, cond_dropout = 0.1;
    std::size_t count = 16;

    // inputs
    std::string weights, image, mask, inversion, image_b;
    std::size_t source_class = 0, target_class = 1, cls = 0;

    // editing
    std::size_t steps = 28, skip = 4;
    double guidance_inv = 1.5, guidance_den = 5.5, guidance = 5.5;
    bool reinit = false, attn_mask = false;
    double attn_scale = 1.0;
    std::string mode = "inf";
};

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

void ensure_out(const Options& o) {
    std::error_code ec;
    fs::create_directories(o.out, ec);
    if (ec) throw IoError("--out: cannot create directory " + o.out + ": " + ec.message());
}

fs::path out_path(const Options& o, const std::string& name) { return fs::path(o.out) / name; }

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + p.string());
    os << text;
    if (!os) throw IoError("write failed: " + p.string());
}

/// Re-throws with the option name in front so errors point at the flag.
template <class Fn>
auto keyed(const std::string& key, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const IoError& e) {
        throw IoError(key + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(key + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

void require(const std::string& value, const std::string& key) {
    if (value.empty()) throw ConfigError(key + " is required for this command");
}

template <class T>
ModelWeights<T> load_weights(const Options& o) {
    require(o.weights, "--weights");
    return keyed("--weights", [&] { return load_checkpoint<T>(o.weights); });
}

template <class T>
Tensor<T> load_image(const std::string& path, const std::string& key, const ModelConfig& cfg) {
    require(path, key);
    Tensor<T> img = keyed(key, [&] { return read_image<T>(path); });
    if (img.shape() != Shape{cfg.channels, cfg.image_size, cfg.image_size})
        throw ShapeError(key + ": image is " + shape_str(img.shape()) + ", the model expects " +
                         shape_str({cfg.channels, cfg.image_size, cfg.image_size}));
    return img;
}

PixelMask load_mask(const std::string& path, const ModelConfig& cfg) {
    require(path, "--mask");
    PixelMask m = keyed("--mask", [&] { return read_pgm_mask(path); });
    keyed("--mask", [&] { m.require_size(cfg.image_size, cfg.image_size, "mask"); });
    return m;
}

ConditionId checked_class(std::size_t id, const std::string& key, const ModelConfig& cfg) {
    if (id >= cfg.num_conditions)
        throw ConfigError(key + ": class " + std::to_string(id) + " outside [0, " +
                          std::to_string(cfg.num_conditions) + ")");
    return {id};
}

EditConfig edit_config(const Options& o) {
    EditConfig ec;
    ec.steps = o.steps;
    ec.skip = o.skip;
    ec.guidance = {o.guidance_inv, o.guidance_den};
    ec.reinit = o.reinit;
    ec.inversion_attention_mask = o.attn_mask;
    ec.attention_scale = o.attn_scale;
    ec.seed = o.seed;
    if (o.skip >= o.steps)
        throw ConfigError("--skip: " + std::to_string(o.skip) + " must be smaller than --steps " +
                          std::to_string(o.steps));
    if (!(o.attn_scale >= 1.0)) throw ConfigError("--attn-scale: must be >= 1");
    keyed("--guidance-inv/--guidance-den", [&] { ec.guidance.validate(); });
    return ec;
}

std::string log_jsonl(const std::vector<EditLogEntry>& log, bool with_peak) {
    std::string out;
    for (const auto& e : log) {
        nlohmann::ordered_json j;
        j["step"] = e.step;
        j["t"] = e.t;
        j["fg_count"] = e.fg_count;
        j["cache_hits"] = e.cache_hits;
        if (with_peak) j["peak_floats"] = e.peak_floats;
        out += j.dump() + "\n";
    }
    return out;
}

/// Writes an image in the input's format, plus a PPM preview for TNSR.
template <class T>
std::string write_result(const Options& o, const std::string& stem, const Tensor<T>& img, const std::string& like) {
    std::string ext = fs::path(like).extension().string();
    if (ext.empty()) ext = ".tnsr";
    const fs::path p = out_path(o, stem + ext);
    write_image(p, img);
    if (ext != ".ppm" && img.dim(0) == 3) write_image(out_path(o, stem + ".ppm"), img);
    return p.string();
}

// ---------------------------------------------------------------------------

template <class T>
int cmd_gen_data(const Options& o) {
    ensure_out(o);
    ModelConfig cfg;
    if (o.count == 0) throw ConfigError("--count: must be >= 1");
    const auto data = gen_dataset<T>(o.seed, o.count, cfg);
    std::ostringstream labels;
    labels << "index,class,shape,color,center_x,center_y,radius,background\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& s = data[i];
        std::ostringstream name;
        name << "sample_" << std::setw(4) << std::setfill('0') << i;
        save_tnsr(out_path(o, name.str() + ".tnsr"), s.image);
        write_ppm(out_path(o, name.str() + ".ppm"), s.image);
        const std::size_t S = cfg.image_size;
        auto lo = [&](double v) { return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, double(S))); };
        auto hi = [&](double v) { return static_cast<std::size_t>(std::clamp(std::ceil(v), 0.0, double(S))); };
        write_pgm_mask(out_path(o, name.str() + "_mask.pgm"),
                       PixelMask::rect(S, S, lo(s.center_y - s.radius), lo(s.center_x - s.radius),
                                       hi(s.center_y + s.radius), hi(s.center_x + s.radius)));
        labels << i << ',' << s.condition.id << ',' << (s.shape == ShapeKind::Square ? "square" : "disc") << ','
               << s.color << ',' << fmt(s.center_x) << ',' << fmt(s.center_y) << ',' << fmt(s.radius) << ','
               << fmt(s.background) << '\n';
    }
    write_text(out_path(o, "labels.csv"), labels.str());
    std::cout << "gen-data: wrote " << data.size() << " samples to " << o.out << "\n";
    return 0;
}

template <class T>
int cmd_train(const Options& o) {
    ensure_out(o);
    ModelConfig cfg;
    cfg.layers = o.layers;
    cfg.token_dim = o.dim;
    cfg.heads = o.heads;
    keyed("--layers/--dim/--heads", [&] { cfg.validate(); });
    TrainConfig tc;
    tc.steps = o.train_steps;
    tc.batch = o.batch;
    tc.learning_rate = o.lr;
    tc.cond_dropout = o.cond_dropout;
    tc.seed = o.seed;
    keyed("--train-steps/--batch/--lr/--cond-dropout", [&] { tc.validate(); });
    Rng rng = Rng(o.seed).fork(0x1417ULL);
    ModelWeights<T> w = init_weights<T>(cfg, rng);
    std::ostringstream log;
    log << "step,loss\n";
    const TrainReport rep = train(w, tc, [&](std::size_t s, double loss) { log << s << ',' << fmt(loss) << '\n'; });
    write_text(out_path(o, "train_log.csv"), log.str());
    save_checkpoint(out_path(o, "model.ckpt"), w);
    const double drop = rep.eval_loss_initial > 0 ? 1.0 - rep.eval_loss_final / rep.eval_loss_initial : 0.0;
    std::cout << "train: " << tc.steps << " steps, eval loss " << fmt(rep.eval_loss_initial) << " -> "
              << fmt(rep.eval_loss_final) << " (" << fmt(100.0 * drop) << "% drop), wrote "
              << out_path(o, "model.ckpt").string() << "\n";
    return 0;
}

template <class T>
int cmd_generate(const Options& o) {
    ensure_out(o);
    const ModelWeights<T> w = load_weights<T>(o);
    const ModelConfig& cfg = w.config;
    const ConditionId c = checked_class(o.cls, "--class", cfg);
    const TimeGrid grid = keyed("--steps/--skip", [&] { return make_time_grid(o.steps, o.skip); });
    if (!(o.guidance >= 0)) throw ConfigError("--guidance: must be >= 0");
    Rng rng = Rng(o.seed).fork(0x6e0ULL);
    TokenState<T> z{sample_gaussian<T>(rng, {cfg.tokens(), cfg.patch_dim()}), {}, grid.top()};
    DiTField<T> field(w);
    z = denoise(field, std::move(z), c, grid, o.guidance);
    const Tensor<T> img = unpatchify(z.tokens, cfg);
    save_tnsr(out_path(o, "generated.tnsr"), img);
    write_ppm(out_path(o, "generated.ppm"), img);
    std::cout << "generate: class " << c.id << ", " << grid.steps() << " steps, wrote "
              << out_path(o, "generated.tnsr").string() << "\n";
    return 0;
}

// Inversion directory: cache.kvc, top.tnsr (token state at t_N), source.tnsr,
// mask.pgm, meta.txt.
template <class T>
int cmd_invert(const Options& o) {
    ensure_out(o);
    const ModelWeights<T> w = load_weights<T>(o);
    const ModelConfig& cfg = w.config;
    const Tensor<T> x0 = load_image<T>(o.image, "--image", cfg);
    const PixelMask mask = load_mask(o.mask, cfg);
    const ConditionId c_src = checked_class(o.source_class, "--source-class", cfg);
    const EditConfig ec = edit_config(o);
    DiTField<T> field(w);
    const InversionResult<T> inv = invert_with_cache(field, x0, mask, c_src, ec);
    const fs::path dir = out_path(o, "inversion");
    fs::create_directories(dir);
    inv.cache.persist(dir / "cache.kvc");
    save_tnsr(dir / "top.tnsr", inv.top.tokens);
    save_tnsr(dir / "source.tnsr", x0);
    write_pgm_mask(dir / "mask.pgm", mask);
    std::ostringstream meta;
    meta << "steps = " << ec.steps << "\nskip = " << ec.skip << "\nsource_class = " << c_src.id
         << "\nattn_mask = " << (ec.inversion_attention_mask ? 1 : 0) << "\nguidance_inv = " << fmt(ec.guidance.inversion)
         << "\n";
    write_text(dir / "meta.txt", meta.str());
    std::cout << "invert: " << inv.grid.steps() << " steps, " << inv.cache.size() << " cache entries, "
              << inv.cache.meter().peak_floats() << " cached floats, wrote " << dir.string() << "\n";
    return 0;
}

std::map<std::string, std::string> read_meta(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw IoError("--inversion: cannot open " + p.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

template <class T>
InversionResult<T> load_inversion(const Options& o, const ModelConfig& cfg, EditConfig& ec, const CLI::App& sub) {
    const fs::path dir = o.inversion;
    auto meta = read_meta(dir / "meta.txt");
    auto field = [&](const std::string& k) -> std::size_t {
        auto it = meta.find(k);
        if (it == meta.end()) throw IoError("--inversion: meta.txt lacks '" + k + "'");
        try {
            return static_cast<std::size_t>(std::stoull(it->second));
        } catch (const std::exception&) {
            throw IoError("--inversion: meta.txt has a malformed '" + k + "'");
        }
    };
    const std::size_t steps = field("steps"), skip = field("skip");
    if (sub.count("--steps") && steps != ec.steps)
        throw ConfigError("--steps: " + std::to_string(ec.steps) + " differs from the stored inversion (" +
                          std::to_string(steps) + ")");
    if (sub.count("--skip") && skip != ec.skip)
        throw ConfigError("--skip: " + std::to_string(ec.skip) + " differs from the stored inversion (" +
                          std::to_string(skip) + ")");
    ec.steps = steps;
    ec.skip = skip;
    InversionResult<T> inv;
    inv.grid = make_time_grid(steps, skip);
    inv.source_condition = {field("source_class")};
    inv.source = keyed("--inversion", [&] { return load_tnsr<T>(dir / "source.tnsr"); });
    inv.mask = keyed("--inversion", [&] { return read_pgm_mask(dir / "mask.pgm"); });
    inv.partition = keyed("--inversion", [&] { return partition_tokens(inv.mask, cfg); });
    inv.top = {keyed("--inversion", [&] { return load_tnsr<T>(dir / "top.tnsr"); }), {}, inv.grid.top()};
    inv.cache = keyed("--inversion", [&] { return KVCache<T>::load(dir / "cache.kvc"); });
    if (inv.top.tokens.shape() != Shape{cfg.tokens(), cfg.patch_dim()})
        throw ShapeError("--inversion: stored state does not match the model");
    return inv;
}

template <class T>
int cmd_edit(const Options& o, const CLI::App& sub) {
    ensure_out(o);
    const ModelWeights<T> w = load_weights<T>(o);
    const ModelConfig& cfg = w.config;
    const ConditionId c_tgt = checked_class(o.target_class, "--target-class", cfg);
    EditConfig ec = edit_config(o);
    DiTField<T> field(w);
    EditResult<T> res;
    Tensor<T> x0;
    PixelMask mask;
    std::string like = o.image;
    if (!o.inversion.empty()) {
        const InversionResult<T> inv = load_inversion<T>(o, cfg, ec, sub);
        x0 = inv.source;
        mask = inv.mask;
        if (like.empty()) like = "source.tnsr";
        res = edit_from_inversion(field, inv, c_tgt, ec);
    } else {
        x0 = load_image<T>(o.image, "--image", cfg);
        mask = load_mask(o.mask, cfg);
        const ConditionId c_src = checked_class(o.source_class, "--source-class", cfg);
        res = edit(field, x0, mask, c_src, c_tgt, ec);
    }
    const std::string written = write_result(o, "edited", res.image, like);
    write_text(out_path(o, "edit_log.jsonl"), log_jsonl(res.log, false));
    const auto rep = region_report(res.image, x0, mask);
    std::cout << "edit: " << res.log.size() << " steps, fg pixels " << mask.count() << ", bg mse "
              << (rep.mse_bg ? fmt(*rep.mse_bg) : std::string("n/a")) << ", wrote " << written << "\n";
    return 0;
}

template <class T>
int cmd_edit_inf(const Options& o) {
    ensure_out(o);
    const ModelWeights<T> w = load_weights<T>(o);
    const ModelConfig& cfg = w.config;
    const Tensor<T> x0 = load_image<T>(o.image, "--image", cfg);
    const PixelMask mask = load_mask(o.mask, cfg);
    const ConditionId c_src = checked_class(o.source_class, "--source-class", cfg);
    const ConditionId c_tgt = checked_class(o.target_class, "--target-class", cfg);
    if (o.reinit) throw ConfigError("--reinit: not available for edit-inf (there is no inverted state)");
    const EditConfig ec = edit_config(o);
    DiTField<T> field(w);
    const EditResult<T> res = inf_edit(field, x0, mask, c_src, c_tgt, ec);
    const std::string written = write_result(o, "edited_inf", res.image, o.image);
    write_text(out_path(o, "edit_inf_log.jsonl"), log_jsonl(res.log, true));
    const auto rep = region_report(res.image, x0, mask);
    std::cout << "edit-inf: " << res.log.size() << " steps, peak_floats " << res.peak_floats << ", bg mse "
              << (rep.mse_bg ? fmt(*rep.mse_bg) : std::string("n/a")) << ", wrote " << written << "\n";
    return 0;
}

template <class T>
int cmd_recon_curve(const Options& o) {
    ensure_out(o);
    const ModelWeights<T> w = load_weights<T>(o);
    const ModelConfig& cfg = w.config;
    const Tensor<T> x0 = load_image<T>(o.image, "--image", cfg);
    const ConditionId c = checked_class(o.cls, "--class", cfg);
    const TimeGrid grid = keyed("--steps/--skip", [&] { return make_time_grid(o.steps, o.skip); });
    DiTField<T> field(w);
    const auto curve = recon_error_curve(field, patchify(x0, cfg), c, grid, o.guidance);
    std::ostringstream csv;
    csv << "depth,mse\n";
    for (const auto& [i, m] : curve) csv << i << ',' << fmt(m) << '\n';
    write_text(out_path(o, "recon_curve.csv"), csv.str());
    std::cout << "recon-curve: " << curve.size() << " depths, mse at depth " << curve.back().first << " = "
              << fmt(curve.back().second) << ", wrote " << out_path(o, "recon_curve.csv").string() << "\n";
    return 0;
}

template <class T>
int cmd_drift(const Options& o) {
    ensure_out(o);
    const ModelWeights<T> w = load_weights<T>(o);
    const ModelConfig& cfg = w.config;
    const Tensor<T> x0 = load_image<T>(o.image, "--image", cfg);
    const PixelMask mask = load_mask(o.mask, cfg);
    const ConditionId c_src = checked_class(o.source_class, "--source-class", cfg);
    const ConditionId c_tgt = checked_class(o.target_class, "--target-class", cfg);
    const EditConfig ec = edit_config(o);
    DiTField<T> field(w);
    const DriftResult changed = keyed("--mask", [&] { return drift_experiment(field, x0, mask, c_src, c_tgt, ec); });
    const double same = mse(vanilla_edit(field, x0, c_src, c_src, ec), x0, mask.inverted());
    std::ostringstream csv;
    csv << "variant,bg_mse\n"
        << "vanilla_same_condition," << fmt(same) << "\n"
        << "vanilla," << fmt(changed.bg_mse_vanilla) << "\n"
        << "kvedit," << fmt(changed.bg_mse_kvedit) << "\n";
    write_text(out_path(o, "drift.csv"), csv.str());
    std::cout << "drift: bg mse vanilla " << fmt(changed.bg_mse_vanilla) << ", kvedit " << fmt(changed.bg_mse_kvedit)
              << ", wrote " << out_path(o, "drift.csv").string() << "\n";
    return 0;
}

template <class T>
int cmd_mem_report(const Options& o) {
    ensure_out(o);
    ModelWeights<T> w;
    if (!o.weights.empty()) {
        w = load_weights<T>(o);
    } else {
        Rng rng = Rng(o.seed).fork(0x3e3ULL);
        w = init_weights<T>(ModelConfig{}, rng);
    }
    const ModelConfig& cfg = w.config;
    PixelMask mask;
    if (!o.mask.empty()) {
        mask = load_mask(o.mask, cfg);
    } else {
        const std::size_t S = cfg.image_size;
        mask = PixelMask::rect(S, S, S / 4, S / 4, 3 * S / 4, 3 * S / 4);
    }
    Tensor<T> x0;
    if (!o.image.empty()) {
        x0 = load_image<T>(o.image, "--image", cfg);
    } else {
        x0 = gen_sample<T>(o.seed, 0, cfg).image;
    }
    if (o.mode != "inf" && o.mode != "retain") throw ConfigError("--mode: expected 'inf' or 'retain', got " + o.mode);
    EditConfig ec = edit_config(o);
    ec.reinit = false;
    DiTField<T> field(w);
    const ConditionId c_src{0}, c_tgt{cfg.num_conditions > 1 ? std::size_t{1} : std::size_t{0}};
    const TokenPartition part = partition_tokens(mask, cfg);
    std::size_t peak = 0;
    if (o.mode == "inf") {
        peak = inf_edit(field, x0, mask, c_src, c_tgt, ec).peak_floats;
    } else {
        peak = invert_with_cache(field, x0, mask, c_src, ec).cache.meter().peak_floats();
    }
    const std::size_t N = ec.grid().steps(), M = cfg.layers, B = part.bg.size(), d = cfg.token_dim;
    const std::size_t predicted = (o.mode == "inf" ? 1 : N) * M * 2 * B * d;
    std::ostringstream csv;
    csv << "mode,steps,layers,bg_tokens,width,peak_floats,predicted_floats\n"
        << o.mode << ',' << N << ',' << M << ',' << B << ',' << d << ',' << peak << ',' << predicted << '\n';
    write_text(out_path(o, "mem_report.csv"), csv.str());
    std::cout << "mem-report: mode " << o.mode << ", N " << N << ", peak_floats " << peak << " (predicted "
              << predicted << ")\n";
    if (peak != predicted) throw NumericError("mem-report: meter peak differs from the predicted count");
    return 0;
}

template <class T>
int cmd_metrics(const Options& o) {
    ensure_out(o);
    require(o.image, "--image");
    require(o.image_b, "--reference");
    const Tensor<T> a = keyed("--image", [&] { return read_image<T>(o.image); });
    const Tensor<T> b = keyed("--reference", [&] { return read_image<T>(o.image_b); });
    if (a.shape() != b.shape())
        throw ShapeError("--reference: shape " + shape_str(b.shape()) + " differs from --image " + shape_str(a.shape()));
    PixelMask mask(a.dim(1), a.dim(2));
    if (!o.mask.empty()) {
        mask = keyed("--mask", [&] { return read_pgm_mask(o.mask); });
        keyed("--mask", [&] { mask.require_size(a.dim(1), a.dim(2), "mask"); });
    }
    const auto r = region_report(a, b, mask);
    auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
    std::ostringstream csv;
    csv << "mse_full,mse_bg,mse_fg,psnr_full,psnr_bg\n"
        << fmt(r.mse_full) << ',' << opt(r.mse_bg) << ',' << opt(r.mse_fg) << ',' << fmt(r.psnr_full) << ','
        << opt(r.psnr_bg) << '\n';
    write_text(out_path(o, "metrics.csv"), csv.str());
    std::cout << "metrics: mse " << fmt(r.mse_full) << ", psnr " << fmt(r.psnr_full) << " dB";
    if (r.mse_bg) std::cout << ", bg mse " << fmt(*r.mse_bg);
    std::cout << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Config file: flat `key = value` lines, '#' comments. Keys are long option
// names without the leading dashes. Entries become flags placed before the
// command-line arguments, so explicit flags win.

std::vector<std::string> config_args(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("--config: cannot open " + path);
    std::vector<std::string> args;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t\r"));
            const auto e = s.find_last_not_of(" \t\r");
            s.erase(e == std::string::npos ? 0 : e + 1);
            return s;
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--config: line " + std::to_string(lineno) + " is not 'key = value'");
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        for (auto& ch : key)
            if (ch == '_') ch = '-';
        if (key.empty() || key == "config")
            throw ConfigError("--config: line " + std::to_string(lineno) + " has an invalid key");
        args.push_back("--" + key + "=" + value);
    }
    return args;
}

} // namespace

int main(int argc, char** argv) {
    Options o;
    CLI::App app{"Background-preserving image editing with cached attention keys/values"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1, 1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "flat key = value file");
    app.add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--seed", o.seed, "random seed");
    app.add_option("--out", o.out, "output directory");

    auto edit_flags = [&](CLI::App* s, bool with_reinit) {
        s->add_option("--steps", o.steps, "total time steps");
        s->add_option("--skip", o.skip, "steps skipped at the noise end");
        s->add_option("--guidance-inv", o.guidance_inv, "guidance during inversion");
        s->add_option("--guidance-den", o.guidance_den, "guidance during denoising");
        s->add_flag("--attn-mask", o.attn_mask, "block background queries from foreground keys during inversion");
        s->add_option("--attn-scale", o.attn_scale, "foreground-to-background logit multiplier (>= 1)");
        if (with_reinit) s->add_flag("--reinit", o.reinit, "blend the inverted foreground with fresh noise");
    };
    auto inputs = [&](CLI::App* s, bool mask, bool classes) {
        s->add_option("--weights", o.weights, "checkpoint file");
        s->add_option("--image", o.image, "source image (.tnsr or .ppm)");
        if (mask) s->add_option("--mask", o.mask, "PGM mask, > 127 = edit region");
        if (classes) {
            s->add_option("--source-class", o.source_class, "condition of the source image");
            s->add_option("--target-class", o.target_class, "condition for the edited foreground");
        }
    };

    auto* gen = app.add_subcommand("gen-data", "render synthetic training samples");
    gen->add_option("--count", o.count, "number of samples");

    auto* tr = app.add_subcommand("train", "train the velocity model");
    tr->add_option("--train-steps", o.train_steps, "optimizer steps");
    tr->add_option("--batch", o.batch, "batch size");
    tr->add_option("--lr", o.lr, "learning rate");
    tr->add_option("--cond-dropout", o.cond_dropout, "probability of the null condition");
    tr->add_option("--layers", o.layers, "transformer blocks");
    tr->add_option("--dim", o.dim, "token width");
    tr->add_option("--heads", o.heads, "attention heads");

    auto* gn = app.add_subcommand("generate", "sample an image from noise");
    gn->add_option("--weights", o.weights, "checkpoint file");
    gn->add_option("--class", o.cls, "condition");
    gn->add_option("--steps", o.steps, "total time steps");
    gn->add_option("--skip", o.skip, "steps skipped at the noise end");
    gn->add_option("--guidance", o.guidance, "guidance scale");

    auto* inv = app.add_subcommand("invert", "invert an image and store the background cache");
    inputs(inv, true, false);
    inv->add_option("--source-class", o.source_class, "condition of the source image");
    edit_flags(inv, false);

    auto* ed = app.add_subcommand("edit", "edit the masked region, keeping the background");
    inputs(ed, true, true);
    ed->add_option("--inversion", o.inversion, "directory written by 'invert'");
    edit_flags(ed, true);

    auto* ei = app.add_subcommand("edit-inf", "inversion-free edit with one timestep of cache");
    inputs(ei, true, true);
    edit_flags(ei, true);

    auto* rc = app.add_subcommand("recon-curve", "reconstruction error by inversion depth");
    rc->add_option("--weights", o.weights, "checkpoint file");
    rc->add_option("--image", o.image, "source image");
    rc->add_option("--class", o.cls, "condition");
    rc->add_option("--steps", o.steps, "total time steps");
    rc->add_option("--skip", o.skip, "steps skipped at the noise end");
    rc->add_option("--guidance", o.guidance, "guidance scale");

    auto* dr = app.add_subcommand("drift", "background drift of full-image versus cached editing");
    inputs(dr, true, true);
    edit_flags(dr, false);

    auto* mr = app.add_subcommand("mem-report", "cached-float peak for a full edit");
    inputs(mr, true, false);
    mr->add_option("--mode", o.mode, "inf or retain");
    edit_flags(mr, false);

    auto* me = app.add_subcommand("metrics", "MSE/PSNR between two images");
    me->add_option("--image", o.image, "edited image");
    me->add_option("--reference", o.image_b, "reference image");
    me->add_option("--mask", o.mask, "optional PGM mask; splits fg/bg metrics");

    std::vector<std::string> args;
    for (int i = argc - 1; i >= 1; --i) args.emplace_back(argv[i]);

    try {
        // Locate the subcommand and --config before the real parse.
        std::string cfg_file;
        std::string command;
        for (int i = 1; i < argc; ++i) {
            const std::string a = argv[i];
            if (a == "--config" && i + 1 < argc) cfg_file = argv[i + 1];
            else if (a.rfind("--config=", 0) == 0) cfg_file = a.substr(9);
            else if (command.empty() && app.get_subcommand_no_throw(a)) command = a;
        }
        // The command's own defaults that differ from the editing defaults.
        if (command == "mem-report" || command == "recon-curve") o.skip = 0;
        if (command == "recon-curve") o.guidance = 1.0;
        if (!cfg_file.empty() && !command.empty()) {
            CLI::App* sub = app.get_subcommand(command);
            std::vector<std::string> extra = config_args(cfg_file);
            for (const auto& e : extra) {
                const std::string key = e.substr(0, e.find('='));
                const bool known = (sub->get_option_no_throw(key) != nullptr) ||
                                   (key != "--config" && app.get_option_no_throw(key) != nullptr);
                if (!known)
                    throw ConfigError("--config: unknown key '" + key.substr(2) + "' for command '" + command + "'");
            }
            // Reversed order: CLI11 consumes from the back. Config entries go
            // right after the subcommand name so explicit flags override.
            std::vector<std::string> merged;
            std::vector<std::string> fwd(args.rbegin(), args.rend());
            for (std::size_t i = 0; i < fwd.size(); ++i) {
                merged.push_back(fwd[i]);
                if (fwd[i] == command) merged.insert(merged.end(), extra.begin(), extra.end());
            }
            args.assign(merged.rbegin(), merged.rend());
        }
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "kvedit: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "kvedit: config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "kvedit: I/O error: " << e.what() << "\n";
        return kExitIo;
    }

    CLI::App* sub = app.get_subcommands().front();
    o.command = sub->get_name();
    auto dispatch = [&]<class T>() -> int {
        if (o.command == "gen-data") return cmd_gen_data<T>(o);
        if (o.command == "train") return cmd_train<T>(o);
        if (o.command == "generate") return cmd_generate<T>(o);
        if (o.command == "invert") return cmd_invert<T>(o);
        if (o.command == "edit") return cmd_edit<T>(o, *sub);
        if (o.command == "edit-inf") return cmd_edit_inf<T>(o);
        if (o.command == "recon-curve") return cmd_recon_curve<T>(o);
        if (o.command == "drift") return cmd_drift<T>(o);
        if (o.command == "mem-report") return cmd_mem_report<T>(o);
        if (o.command == "metrics") return cmd_metrics<T>(o);
        throw ConfigError("unknown command " + o.command);
    };
    try {
        return o.precision == "f64" ? dispatch.template operator()<double>() : dispatch.template operator()<float>();
    } catch (const ConfigError& e) {
        std::cerr << "kvedit: config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        std::cerr << "kvedit: shape error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "kvedit: I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const CacheError& e) {
        std::cerr << "kvedit: cache error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "kvedit: numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "kvedit: error: " << e.what() << "\n";
        return 1;
    }
}
