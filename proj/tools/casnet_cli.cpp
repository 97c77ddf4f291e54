// Command-line front end: dataset generation, training, atlas export,
// single-image segmentation, evaluation, slice export, and gradient
// verification. Exit codes: 0 success, 2 config error, 3 numeric failure.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "casnet/atlas.hpp"
#include "casnet/diffeo.hpp"
#include "casnet/errors.hpp"
#include "casnet/optim.hpp"
#include "casnet/pipeline.hpp"
#include "casnet/slices.hpp"
#include "casnet/vvol_io.hpp"

namespace {

using namespace casnet;

// Every TrainConfig key, taken from the canonical config serialization so
// the flag list cannot drift from apply_config_kv.
std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    const std::string text = config_to_text(TrainConfig{});
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t eol = text.find('\n', pos);
        const std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        const std::size_t eq = line.find(" = ");
        if (eq != std::string::npos) keys.push_back(line.substr(0, eq));
    }
    return keys;
}

struct ConfigFlags {
    std::string config_path;
    std::map<std::string, std::string> values; // key -> flag value (if given)
};

// --config <file> plus one override flag per config key.
void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
    cmd->add_option("--config", flags.config_path, "key=value config file");
    for (const std::string& key : config_keys()) {
        std::string& slot = flags.values[key];
        cmd->add_option("--" + key, slot, "override config key " + key);
    }
}

TrainConfig resolve_config(const CLI::App* cmd, const ConfigFlags& flags) {
    TrainConfig cfg;
    if (!flags.config_path.empty()) cfg = parse_config_file(flags.config_path);
    for (const auto& [key, value] : flags.values)
        if (cmd->count("--" + key) > 0) apply_config_kv(cfg, key, value);
    validate_config(cfg);
    return cfg;
}

SliceAxis parse_axis(const std::string& name) {
    if (name == "x") return SliceAxis::x;
    if (name == "y") return SliceAxis::y;
    if (name == "z") return SliceAxis::z;
    throw ConfigError("axis must be x, y, or z (got '" + name + "')");
}

ModelState load_state(const std::string& checkpoint) {
    if (checkpoint.empty()) throw ConfigError("a --checkpoint directory is required");
    return load_checkpoint(checkpoint);
}

int run_generate(const TrainConfig& cfg) {
    Dataset d = build_dataset(cfg);
    write_dataset(cfg.data_dir, d);
    std::printf("wrote %d subjects (%d train / %d val / %d test), grid %d^3, %d classes -> %s\n",
                int(d.subjects.size()), int(d.rows(Split::train).size()),
                int(d.rows(Split::val).size()), int(d.rows(Split::test).size()), cfg.grid,
                d.c, cfg.data_dir.c_str());
    return 0;
}

int run_train(const TrainConfig& cfg) {
    Dataset d = read_dataset(cfg.data_dir);
    TrainResult res = train(cfg, d, cfg.out_dir);
    const EpochRow& last = res.log.back();
    std::printf("trained %d epochs; final total loss %.6f (L_S %.6f L_R %.6f L_C %.6f L_Reg %.6f)\n",
                cfg.epochs, last.total, last.l_s, last.l_r, last.l_c, last.l_reg);
    std::printf("checkpoint: %s/checkpoint_final\n", cfg.out_dir.c_str());
    return 0;
}

int run_make_atlas(const TrainConfig& cfg, const std::string& checkpoint,
                   const std::string& out_dir) {
    ModelState st = load_state(checkpoint);
    std::filesystem::create_directories(out_dir);
    const std::int64_t mid = st.grid.h / 2;
    for (int g = 0; g < st.cond.groups(); ++g) {
        const DeformationField psi = exp_svf(st.cond.q[std::size_t(g)], cfg.integ);
        const AtlasPair ag = conditional_atlas(st.atlas, psi);
        char name[64];
        std::snprintf(name, sizeof name, "group%02d", g);
        const std::string base = out_dir + "/" + name;
        write_vvol(base + "_image.vvol", ag.image);
        write_vvol(base + "_labels.vvol", ag.labels);
        write_slice_pgm(ag.image, SliceAxis::z, mid, base + "_image_z.pgm");
        write_slice_ppm(argmax_labels(ag.labels), SliceAxis::z, mid, base + "_labels_z.ppm");
    }
    std::printf("wrote %d conditional atlases (image+labels VVOL, mid-slice PGM/PPM) -> %s\n",
                st.cond.groups(), out_dir.c_str());
    return 0;
}

int run_segment(const TrainConfig& cfg, const std::string& checkpoint,
                const std::string& image_path, double age, const std::string& out_dir) {
    ModelState st = load_state(checkpoint);
    const ScalarVolume image = read_vvol_scalar(image_path);
    InferenceOutput out = infer_subject(st, cfg, image, age);
    std::filesystem::create_directories(out_dir);
    write_vvol(out_dir + "/ss.vvol", out.ss);
    write_vvol(out_dir + "/drs.vvol", out.drs);
    write_vvol(out_dir + "/merged.vvol", out.merged);
    write_vvol(out_dir + "/phi.vvol", out.phi.displacement);
    const std::int64_t mid = image.grid.h / 2;
    write_slice_pgm(image, SliceAxis::z, mid, out_dir + "/image_z.pgm");
    write_slice_ppm(argmax_labels(out.ss), SliceAxis::z, mid, out_dir + "/ss_z.ppm");
    write_slice_ppm(argmax_labels(out.drs), SliceAxis::z, mid, out_dir + "/drs_z.ppm");
    write_slice_ppm(argmax_labels(out.merged), SliceAxis::z, mid, out_dir + "/merged_z.ppm");
    const JacobianStats js = jacobian_stats(out.phi);
    std::printf("segmented %s (age %.3f): outputs in %s; negative-Jacobian fraction %.3e\n",
                image_path.c_str(), age, out_dir.c_str(), js.negative_fraction);
    return 0;
}

int run_evaluate(const TrainConfig& cfg, const std::string& checkpoint,
                 const std::string& split_name, const std::string& csv_path) {
    ModelState st = load_state(checkpoint);
    Dataset d = read_dataset(cfg.data_dir);
    Split split = Split::test;
    if (split_name == "train") split = Split::train;
    else if (split_name == "val") split = Split::val;
    else if (split_name != "test")
        throw ConfigError("split must be train, val, or test (got '" + split_name + "')");
    EvalReport rep = evaluate(st, cfg, d, split);
    std::fputs(eval_table(rep).c_str(), stdout);
    if (!csv_path.empty()) {
        write_eval_csv(rep, csv_path);
        std::printf("csv: %s\n", csv_path.c_str());
    }
    return 0;
}

int run_export_slices(const std::string& input, const std::string& axis_name,
                      std::int64_t index, const std::string& out_path) {
    const SliceAxis axis = parse_axis(axis_name);
    const VvolKind kind = peek_vvol_kind(input);
    if (kind == VvolKind::vector)
        throw ConfigError("export-slices: " + input + " holds a vector field, not an image");
    if (kind == VvolKind::scalar) {
        const ScalarVolume vol = read_vvol_scalar(input);
        if (index < 0) index = (axis == SliceAxis::x ? vol.grid.l
                                : axis == SliceAxis::y ? vol.grid.w
                                                       : vol.grid.h) / 2;
        write_slice_pgm(vol, axis, index, out_path);
    } else {
        const ProbLabelVolume vol = read_vvol_prob(input);
        if (index < 0) index = (axis == SliceAxis::x ? vol.grid.l
                                : axis == SliceAxis::y ? vol.grid.w
                                                       : vol.grid.h) / 2;
        write_slice_ppm(argmax_labels(vol), axis, index, out_path);
    }
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

int run_grad_check(std::uint64_t fixture_seed, std::uint64_t probe_seed, int probes,
                   double step, double tol) {
    GradCheckFixture fx = gradcheck_fixture(fixture_seed);
    PipelineObjective obj(fx.state, fx.cfg, fx.data, fx.positions, 0);
    std::printf("8^3 fixture seed %llu, loss %.6f, %d probes/block, step %g, tolerance %g\n",
                (unsigned long long)fixture_seed, obj.value(), probes, step, tol);
    const ParamSet ps = obj.params();
    bool ok = true;
    std::printf("%-8s %8s %14s  %s\n", "block", "probes", "max rel err", "status");
    for (int b = 0; b < int(ps.blocks.size()); ++b) {
        GradCheckReport r =
            grad_check_block(obj, b, probes, step, probe_seed + std::uint64_t(b));
        const double err = r.max_rel_err[std::size_t(b)];
        const bool pass = err < tol;
        ok = ok && pass;
        std::printf("%-8s %8d %14.3e  %s\n", ps.blocks[std::size_t(b)].name.c_str(), probes,
                    err, pass ? "ok" : "FAIL");
    }
    if (!ok) {
        std::fprintf(stderr, "grad-check: tolerance exceeded\n");
        return 3;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"age-conditioned atlas registration + segmentation pipeline"};
    app.require_subcommand(1);

    ConfigFlags gen_flags, train_flags, atlas_flags, seg_flags, eval_flags;

    CLI::App* gen = app.add_subcommand("generate-data", "write a synthetic phantom dataset");
    add_config_flags(gen, gen_flags);

    CLI::App* tr = app.add_subcommand("train", "train on a generated dataset");
    add_config_flags(tr, train_flags);

    CLI::App* ma = app.add_subcommand("make-atlas", "export per-group conditional atlases");
    add_config_flags(ma, atlas_flags);
    std::string atlas_ckpt, atlas_out;
    ma->add_option("--checkpoint", atlas_ckpt, "checkpoint directory")->required();
    ma->add_option("--out", atlas_out, "output directory (default: <out_dir>/atlas)");

    CLI::App* seg = app.add_subcommand("segment", "segment one image volume");
    add_config_flags(seg, seg_flags);
    std::string seg_ckpt, seg_image, seg_out;
    double seg_age = 0.0;
    seg->add_option("--checkpoint", seg_ckpt, "checkpoint directory")->required();
    seg->add_option("--image", seg_image, "input scalar VVOL")->required();
    seg->add_option("--age", seg_age, "subject age in weeks")->required();
    seg->add_option("--out", seg_out, "output directory (default: <out_dir>/segment)");

    CLI::App* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset split");
    add_config_flags(ev, eval_flags);
    std::string eval_ckpt, eval_split = "test", eval_csv;
    ev->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
    ev->add_option("--split", eval_split, "train, val, or test (default test)");
    ev->add_option("--csv", eval_csv, "report CSV path (default: <out_dir>/eval.csv)");

    CLI::App* ex = app.add_subcommand("export-slices", "write a PGM/PPM slice from a VVOL");
    std::string ex_input, ex_axis = "z", ex_out;
    std::int64_t ex_index = -1;
    ex->add_option("--input", ex_input, "VVOL file (scalar -> PGM, labels -> PPM)")->required();
    ex->add_option("--axis", ex_axis, "x, y, or z (default z)");
    ex->add_option("--index", ex_index, "slice index (default: middle)");
    ex->add_option("--out", ex_out, "output image path")->required();

    CLI::App* gc = app.add_subcommand("grad-check", "verify pipeline gradients on a fixture");
    std::uint64_t gc_seed = 1, gc_probe_seed = 101;
    int gc_probes = 64;
    double gc_step = 1e-4, gc_tol = 1e-6;
    gc->add_option("--seed", gc_seed, "fixture parameter seed (default 1)");
    gc->add_option("--probe-seed", gc_probe_seed, "probe RNG seed (default 101)");
    gc->add_option("--probes", gc_probes, "probes per parameter block (default 64)");
    gc->add_option("--step", gc_step, "central-difference step (default 1e-4)");
    gc->add_option("--tol", gc_tol, "max relative error (default 1e-6)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    }

    try {
        if (gen->parsed()) return run_generate(resolve_config(gen, gen_flags));
        if (tr->parsed()) return run_train(resolve_config(tr, train_flags));
        if (ma->parsed()) {
            const TrainConfig cfg = resolve_config(ma, atlas_flags);
            if (atlas_out.empty()) atlas_out = cfg.out_dir + "/atlas";
            return run_make_atlas(cfg, atlas_ckpt, atlas_out);
        }
        if (seg->parsed()) {
            const TrainConfig cfg = resolve_config(seg, seg_flags);
            if (seg_out.empty()) seg_out = cfg.out_dir + "/segment";
            return run_segment(cfg, seg_ckpt, seg_image, seg_age, seg_out);
        }
        if (ev->parsed()) {
            const TrainConfig cfg = resolve_config(ev, eval_flags);
            if (eval_csv.empty()) eval_csv = cfg.out_dir + "/eval.csv";
            return run_evaluate(cfg, eval_ckpt, eval_split, eval_csv);
        }
        if (ex->parsed()) return run_export_slices(ex_input, ex_axis, ex_index, ex_out);
        if (gc->parsed()) return run_grad_check(gc_seed, gc_probe_seed, gc_probes, gc_step, gc_tol);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    }
    return 0;
}
