#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "groupreg/dataio.hpp"
#include "groupreg/evaluation.hpp"
#include "groupreg/field_ops.hpp"
#include "groupreg/oneshot.hpp"
#include "groupreg/serialization.hpp"

using namespace groupreg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Shared option groups.

struct InputOptions {
    std::string manifest;
    std::string data_root;
    std::vector<std::string> volumes;
    std::vector<int> crop_box;  // z0 y0 x0 z1 y1 x1, inclusive
    int crop_margin = -1;       // manifest value when negative
    bool no_crop = false;
};

void add_input_options(CLI::App* app, InputOptions& in) {
    app->add_option("--manifest", in.manifest, "Case manifest (JSON)");
    app->add_option("--data-root", in.data_root, "Directory that manifest paths are relative to");
    app->add_option("--volumes", in.volumes, "Phase volumes (.vol) in temporal order, instead of a manifest");
    app->add_option("--crop-box", in.crop_box, "Explicit crop box z0 y0 x0 z1 y1 x1 (inclusive)")->expected(6);
    app->add_option("--crop-margin", in.crop_margin, "Landmark crop margin in voxels (default from manifest)");
    app->add_flag("--no-crop", in.no_crop, "Keep the full field of view");
}

struct LoadedInput {
    ImageGroup group;
    std::vector<LandmarkSet> landmarks;  // zero-based, cropped frame
    std::vector<std::size_t> landmark_phases;
    Dims3 offset{};
};

std::vector<std::string> default_labels(std::size_t n) {
    std::vector<std::string> labels;
    for (std::size_t k = 0; k < n; ++k) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "T%02zu", k * 10);
        labels.emplace_back(buf);
    }
    return labels;
}

LoadedInput load_input(const InputOptions& in, std::optional<CropBox> forced_box = std::nullopt) {
    if (in.manifest.empty() == in.volumes.empty()) {
        throw Error("invalid_arguments", "give exactly one of --manifest or --volumes");
    }
    std::vector<LandmarkSet> landmarks;
    std::vector<std::size_t> phases;
    int margin = in.crop_margin;
    ImageGroup group = [&] {
        if (in.manifest.empty()) {
            std::vector<Volume> v;
            for (const auto& p : in.volumes) v.push_back(read_volume(p));
            return ImageGroup(std::move(v), default_labels(in.volumes.size()));
        }
        const CaseMeta meta = in.data_root.empty() ? load_manifest(in.manifest)
                                                   : load_manifest(in.manifest, fs::path(in.data_root));
        CaseData data = load_case(meta);
        std::vector<Volume> v;
        for (std::size_t n = 0; n < data.group.size(); ++n)
            v.push_back(normalize(data.group[n], meta.intensity_divisor, meta.intensity_offset));
        landmarks = std::move(data.landmarks);
        phases = std::move(data.landmark_phases);
        if (margin < 0) margin = meta.crop_margin;
        return ImageGroup(std::move(v), data.group.phase_labels());
    }();

    std::optional<CropBox> box = forced_box;
    if (!box && in.crop_box.size() == 6) {
        box = CropBox{{in.crop_box[0], in.crop_box[1], in.crop_box[2]}, {in.crop_box[3], in.crop_box[4], in.crop_box[5]}};
    } else if (!box && !in.no_crop && !landmarks.empty()) {
        box = landmark_crop_box(group.grid(), landmarks, margin < 0 ? 8 : margin);
    }
    if (!box) return {std::move(group), std::move(landmarks), std::move(phases), Dims3{0, 0, 0}};
    CropResult r = crop(group, landmarks, *box);
    return {std::move(r.group), std::move(r.landmarks), std::move(phases), r.offset};
}

void add_config_options(CLI::App* app, RegConfig& c) {
    app->add_option("--learning_rate,--learning-rate", c.learning_rate, "Adam learning rate")->capture_default_str();
    app->add_option("--lambda0", c.weights.lambda0, "Smoothness weight")->capture_default_str();
    app->add_option("--lambda1", c.weights.lambda1, "Cyclic weight")->capture_default_str();
    app->add_option("--ncc_window,--ncc-window", c.weights.ncc_window, "Local NCC window size")->capture_default_str();
    app->add_option("--n_stop,--n-stop", c.n_stop, "Stopping window length")->capture_default_str();
    app->add_option("--sigma_stop,--sigma-stop", c.sigma_stop, "Stopping threshold")->capture_default_str();
    app->add_option("--n_iter_min,--n-iter-min", c.n_iter_min, "Minimum iterations before stopping")->capture_default_str();
    app->add_option("--max_iters,--max-iters", c.max_iters, "Iteration cap")->capture_default_str();
    app->add_option("--seed", c.seed, "Weight initialization seed")->capture_default_str();
    app->add_option("--num_downscales,--num-downscales", c.net.num_downscales, "Encoder downscales")->capture_default_str();
    app->add_option("--base_channels,--base-channels", c.net.base_channels, "Channels at the first level")->capture_default_str();
    app->add_option("--inference_scale,--inference-scale", c.net.inference_scale, "Network resolution factor")->capture_default_str();
    app->add_flag("--block_template_gradient,--block-template-gradient", c.weights.block_template_gradient,
                  "Treat the template gradient in the smoothness weight as constant");
    app->add_flag("!--no-cyclic", c.cyclic_enabled, "Disable the cyclic term");
}

ProgressCallback progress_printer(bool quiet) {
    if (quiet) return {};
    return [](int iter, const LossBreakdown& l) {
        if (iter == 1 || iter % 50 == 0) {
            std::cerr << "iter " << iter << " similarity " << l.similarity << " smoothness " << l.smoothness
                      << " cyclic " << l.cyclic << " total " << l.total << '\n';
        }
    };
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw Error("io_error", "cannot write " + path.string());
    os << j.dump(2) << '\n';
}

Volume template_of(const ImageGroup& group, const FieldSet& fields) {
    std::vector<Volume> warped;
    for (std::size_t n = 0; n < group.size(); ++n) warped.push_back(warp(group[n], fields[n]));
    return implicit_template(ImageGroup(std::move(warped)));
}

/// Writes fields, template, report, trace, config and checkpoint.
json save_run(const fs::path& out, const LoadedInput& input, const RegistrationResult& r, const RegConfig& config) {
    fs::create_directories(out);
    write_fieldset({r.fields, input.group.phase_labels(), input.offset}, out / "fields");
    write_volume(template_of(input.group, r.fields), out / "template.vol");
    write_loss_trace(r.report.loss_trace, out / "loss_trace.csv");
    save_checkpoint(r.state, out / "checkpoint.ckpt");
    json report = report_to_json(r.report);
    report["config"] = config;
    report["crop_offset"] = input.offset;
    report["dims"] = input.group.grid().dims;
    report["phase_labels"] = input.group.phase_labels();
    write_json(report, out / "report.json");
    return report;
}

// ---------------------------------------------------------------------------

struct RegisterArgs {
    InputOptions input;
    RegConfig config;
    std::string out = "run";
    std::string resume;
    std::optional<int> additional;
    bool quiet = false;
};

void run_register(RegisterArgs& a, const CLI::App& app) {
    const LoadedInput input = load_input(a.input);
    RegConfig config = a.config;
    RegistrationResult result = [&] {
        if (!a.resume.empty()) {
            const Checkpoint ck = load_checkpoint(a.resume);
            config = ck.config;
            if (app.count("--max_iters")) config.max_iters = a.config.max_iters;
            return resume(ck, input.group, config, a.additional, progress_printer(a.quiet));
        }
        config.net.num_phases = static_cast<int>(input.group.size());
        return register_group(input.group, config, progress_printer(a.quiet));
    }();
    const json report = save_run(a.out, input, result, config);
    std::cout << report.dump(2) << '\n';
}

struct EvaluateArgs {
    std::string fields;
    std::string source;
    std::size_t source_phase = 0;
    std::vector<std::string> targets;
    std::vector<std::size_t> target_phases;
    std::string convention = "one-based";
    std::string axis_order = "xyz";
    std::string format = "table";
    std::string json_out;
    std::string histogram;
};

LandmarkSet load_in_frame(const std::string& path, const EvaluateArgs& a, const FieldSetFile& set) {
    const auto conv = a.convention == "one-based" ? LandmarkConvention::one_based : LandmarkConvention::zero_based;
    const AxisOrder order = a.axis_order == "xyz" ? AxisOrder::xyz : AxisOrder::zyx;
    const LandmarkSet raw = read_landmarks(path, conv, order);
    // Original-grid frame first, then shift into the cropped frame.
    Dims3 full = set.fields.grid().dims;
    for (int ax = 0; ax < 3; ++ax) full[ax] += set.crop_offset[ax];
    LandmarkSet lm = convert_landmarks(raw, LandmarkConvention::zero_based, Grid3::make(full));
    for (auto& p : lm.points)
        for (int ax = 0; ax < 3; ++ax) p[ax] -= set.crop_offset[ax];
    return lm;
}

void run_evaluate(const EvaluateArgs& a) {
    if (a.targets.size() != a.target_phases.size()) {
        throw Error("invalid_arguments", "each --target needs a matching --target-phase");
    }
    const FieldSetFile set = read_fieldset(a.fields);
    const Vec3 spacing = set.fields.grid().spacing;
    const LandmarkSet src = load_in_frame(a.source, a, set);

    json out{{"source", a.source}, {"source_phase", a.source_phase}, {"spacing_mm", spacing}, {"results", json::array()}};
    std::vector<std::pair<std::string, TREStats>> rows;
    rows.emplace_back("before " + std::to_string(a.source_phase), TREStats{});
    std::vector<double> pooled;
    for (std::size_t t = 0; t < a.targets.size(); ++t) {
        const LandmarkSet tgt = load_in_frame(a.targets[t], a, set);
        const Evaluation e = evaluate_registration(set.fields, src, tgt, a.source_phase, a.target_phases[t], spacing);
        const TREStats before = tre(src, tgt, spacing);
        const std::string name = set.phase_labels.at(a.source_phase) + "->" + set.phase_labels.at(a.target_phases[t]);
        rows.emplace_back(name + " before", before);
        rows.emplace_back(name + " after", e.stats);
        out["results"].push_back({{"target", a.targets[t]},
                                  {"target_phase", a.target_phases[t]},
                                  {"before", stats_to_json(before)},
                                  {"after", stats_to_json(e.stats)},
                                  {"inversion_converged", e.inversion_converged}});
        pooled.insert(pooled.end(), e.stats.errors.begin(), e.stats.errors.end());
    }
    rows.erase(rows.begin());
    if (!a.json_out.empty()) write_json(out, a.json_out);
    if (!a.histogram.empty() && !pooled.empty()) {
        write_histogram(tre_histogram(pooled), a.histogram + ".pgm", a.histogram + ".csv");
    }
    if (a.format == "json") {
        std::cout << out.dump(2) << '\n';
    } else {
        std::cout << format_stats_table(rows);
    }
}

struct PairwiseArgs {
    std::string fields;
    std::size_t from = 0;
    std::size_t to = 0;
    std::string out;
};

void run_pairwise(const PairwiseArgs& a) {
    const FieldSetFile set = read_fieldset(a.fields);
    const InversionResult r = pairwise_field(set.fields, a.from, a.to);
    write_field(r.field, a.out);
    std::cout << json{{"from", a.from}, {"to", a.to}, {"inversion_converged", r.converged}, {"out", a.out}}.dump()
              << '\n';
}

struct PhantomArgs {
    PhantomSpec spec;
    std::vector<int> dims{48, 48, 48};
    std::string out = "phantom";
    bool do_register = false;
    RegConfig config;
    bool quiet = false;
};

json phantom_tre(const FieldSet& fields, const Phantom& p) {
    std::vector<double> all;
    for (std::size_t a = 0; a < p.landmarks.size(); ++a)
        for (std::size_t b = 0; b < p.landmarks.size(); ++b) {
            if (a == b) continue;
            const auto e = evaluate_registration(fields, p.landmarks[a], p.landmarks[b], a, b, p.group.grid().spacing);
            all.insert(all.end(), e.stats.errors.begin(), e.stats.errors.end());
        }
    return stats_to_json(compute_stats(std::move(all)), false);
}

void run_phantom(PhantomArgs& a) {
    a.spec.dims = {a.dims[0], a.dims[1], a.dims[2]};
    const Phantom p = make_phantom(a.spec);
    const fs::path out(a.out);
    fs::create_directories(out);
    const auto labels = default_labels(p.group.size());
    json files = json::array();
    for (std::size_t n = 0; n < p.group.size(); ++n) {
        const std::string vol = "phase_" + labels[n] + ".vol";
        const std::string lm = "landmarks_" + labels[n] + ".txt";
        write_volume(p.group[n], out / vol);
        write_landmarks(convert_landmarks(p.landmarks[n], LandmarkConvention::one_based, p.group.grid()), out / lm,
                        AxisOrder::xyz);
        files.push_back({{"label", labels[n]}, {"volume", vol}, {"landmarks", lm}});
    }
    write_fieldset({p.truth, labels, {0, 0, 0}}, out / "truth");

    json summary{{"dims", a.spec.dims},
                 {"num_phases", a.spec.num_phases},
                 {"max_amplitude", a.spec.max_amplitude},
                 {"num_landmarks", a.spec.num_landmarks},
                 {"seed", a.spec.seed},
                 {"periodic", a.spec.periodic},
                 {"landmark_convention", "one-based"},
                 {"landmark_axis_order", "xyz"},
                 {"phases", files},
                 {"tre_before", phantom_tre(FieldSet::zeros(p.group.grid(), p.group.size()), p)},
                 {"tre_truth", phantom_tre(p.truth, p)}};

    if (a.do_register) {
        RegConfig c = a.config;
        c.net.num_phases = a.spec.num_phases;
        const RegistrationResult r = register_group(p.group, c, progress_printer(a.quiet));
        LoadedInput input{ImageGroup(std::vector<Volume>(p.group.volumes()), labels), {}, {}, Dims3{0, 0, 0}};
        summary["registration"] = save_run(out / "run", input, r, c);
        summary["tre_after"] = phantom_tre(r.fields, p);
        const double before = summary["tre_before"]["mean_mm"].get<double>();
        const double after = summary["tre_after"]["mean_mm"].get<double>();
        summary["tre_ratio"] = before > 0 ? after / before : 0.0;
    }
    write_json(summary, out / "phantom.json");
    std::cout << summary.dump(2) << '\n';
}

struct PlotsArgs {
    std::string run;
    std::string out = "plots";
    InputOptions input;
    int slice_axis = 0;
    int slice_index = -1;
    double range = 0.5;
    std::string evaluation;
};

void run_plots(PlotsArgs& a) {
    const fs::path run(a.run), out(a.out);
    fs::create_directories(out);
    json written = json::array();
    if (fs::exists(run / "loss_trace.csv")) {
        write_loss_curve(read_loss_trace(run / "loss_trace.csv"), out / "loss_curve.pgm");
        written.push_back((out / "loss_curve.pgm").string());
    }
    if (!a.evaluation.empty()) {
        std::ifstream is(a.evaluation);
        if (!is) throw Error("io_error", "cannot read " + a.evaluation);
        const json ev = json::parse(is);
        std::vector<double> errors;
        for (const auto& r : ev.at("results"))
            for (double e : r.at("after").at("errors_mm")) errors.push_back(e);
        write_histogram(tre_histogram(errors), out / "tre_histogram.pgm", out / "tre_histogram.csv");
        written.push_back((out / "tre_histogram.pgm").string());
    }
    if (!a.input.manifest.empty() || !a.input.volumes.empty()) {
        const FieldSetFile set = read_fieldset(run / "fields");
        const Dims3 d = set.fields.grid().dims;
        const CropBox box{set.crop_offset,
                          {set.crop_offset[0] + d[0] - 1, set.crop_offset[1] + d[1] - 1, set.crop_offset[2] + d[2] - 1}};
        const LoadedInput input = load_input(a.input, box);
        const Volume tmpl = fs::exists(run / "template.vol") ? read_volume(run / "template.vol")
                                                              : template_of(input.group, set.fields);
        SliceSpec slice{a.slice_axis, a.slice_index};
        if (slice.index < 0 && slice.axis >= 0 && slice.axis < 3) slice.index = d[slice.axis] / 2;
        for (const auto& p : export_difference_maps(input.group, set.fields, tmpl, slice, out, a.range))
            written.push_back(p.string());
    }
    std::cout << json{{"written", written}}.dump(2) << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Groupwise one-shot deformable registration of 4D image series"};
    app.require_subcommand(1);

    RegisterArgs reg;
    auto* cmd_reg = app.add_subcommand("register", "Register a case and write fields, report and checkpoint");
    add_input_options(cmd_reg, reg.input);
    add_config_options(cmd_reg, reg.config);
    cmd_reg->add_option("--out", reg.out, "Output directory")->capture_default_str();
    cmd_reg->add_option("--resume", reg.resume, "Continue from a checkpoint");
    cmd_reg->add_option("--additional-iters", reg.additional, "With --resume: run at most this many more iterations");
    cmd_reg->add_flag("--quiet", reg.quiet, "No progress output");

    EvaluateArgs ev;
    auto* cmd_ev = app.add_subcommand("evaluate", "Landmark TRE of a registered field set");
    cmd_ev->add_option("--fields", ev.fields, "Field-set directory")->required();
    cmd_ev->add_option("--source", ev.source, "Source landmark file")->required();
    cmd_ev->add_option("--source-phase", ev.source_phase, "Phase the source landmarks belong to")->capture_default_str();
    cmd_ev->add_option("--target", ev.targets, "Target landmark file(s)")->required();
    cmd_ev->add_option("--target-phase", ev.target_phases, "Phase of each target file")->required();
    cmd_ev->add_option("--convention", ev.convention, "Landmark index convention")
        ->check(CLI::IsMember({"one-based", "zero-based"}))
        ->capture_default_str();
    cmd_ev->add_option("--axis-order", ev.axis_order, "Column order in landmark files")
        ->check(CLI::IsMember({"xyz", "zyx"}))
        ->capture_default_str();
    cmd_ev->add_option("--format", ev.format, "Standard output format")
        ->check(CLI::IsMember({"table", "json"}))
        ->capture_default_str();
    cmd_ev->add_option("--json", ev.json_out, "Also write the JSON report here");
    cmd_ev->add_option("--histogram", ev.histogram, "Write <prefix>.pgm and <prefix>.csv TRE histograms");

    PairwiseArgs pw;
    auto* cmd_pw = app.add_subcommand("pairwise", "Extract the field mapping phase m onto phase n");
    cmd_pw->add_option("--fields", pw.fields, "Field-set directory")->required();
    cmd_pw->add_option("--from", pw.from, "Phase m")->required();
    cmd_pw->add_option("--to", pw.to, "Phase n")->required();
    cmd_pw->add_option("--out", pw.out, "Output .dvf file")->required();

    PhantomArgs ph;
    auto* cmd_ph = app.add_subcommand("phantom", "Generate a synthetic phantom, optionally register and grade it");
    cmd_ph->add_option("--out", ph.out, "Output directory")->capture_default_str();
    cmd_ph->add_option("--dims", ph.dims, "D H W")->expected(3)->capture_default_str();
    cmd_ph->add_option("--phases", ph.spec.num_phases, "Number of phases")->capture_default_str();
    cmd_ph->add_option("--amplitude", ph.spec.max_amplitude, "Peak displacement in voxels")->capture_default_str();
    cmd_ph->add_option("--landmarks", ph.spec.num_landmarks, "Landmarks per phase")->capture_default_str();
    cmd_ph->add_option("--phantom-seed", ph.spec.seed, "Texture and landmark seed")->capture_default_str();
    cmd_ph->add_flag("!--aperiodic", ph.spec.periodic, "Monotone instead of periodic motion");
    cmd_ph->add_flag("--register", ph.do_register, "Register the phantom and report TRE");
    cmd_ph->add_flag("--quiet", ph.quiet, "No progress output");
    add_config_options(cmd_ph, ph.config);

    PlotsArgs pl;
    auto* cmd_pl = app.add_subcommand("plots", "Loss curve, TRE histogram and difference maps of a run");
    cmd_pl->add_option("--run", pl.run, "Register output directory")->required();
    cmd_pl->add_option("--out", pl.out, "Output directory")->capture_default_str();
    cmd_pl->add_option("--evaluation", pl.evaluation, "JSON written by evaluate --json");
    cmd_pl->add_option("--slice-axis", pl.slice_axis, "0 axial, 1 coronal, 2 sagittal")->capture_default_str();
    cmd_pl->add_option("--slice-index", pl.slice_index, "Slice index (default: middle)");
    cmd_pl->add_option("--range", pl.range, "Difference mapped to full black/white")->capture_default_str();
    add_input_options(cmd_pl, pl.input);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error code=usage message=" << e.what() << '\n';
        return 2;
    }

    try {
        if (*cmd_reg) run_register(reg, *cmd_reg);
        else if (*cmd_ev) run_evaluate(ev);
        else if (*cmd_pw) run_pairwise(pw);
        else if (*cmd_ph) run_phantom(ph);
        else if (*cmd_pl) run_plots(pl);
    } catch (const Error& e) {
        std::cerr << "error code=" << e.code() << " message=" << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error code=internal message=" << e.what() << '\n';
        return 1;
    }
    return 0;
}
