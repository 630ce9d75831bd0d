// icreg command-line front end.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include <icreg/icreg.hpp>
#include <icreg/report.hpp>

namespace {

using namespace icreg;

struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> overrides;

    void attach(CLI::App* app)
    {
        app->add_option("--config", config_path, "Key-value configuration file");
        app->add_option("--set", overrides, "Override one setting, e.g. --set nonrigid.iterations=40,20")
            ->take_all()
            ->allow_extra_args(false);
    }

    PipelineConfig load() const
    {
        PipelineConfig c = config_path.empty() ? PipelineConfig{} : load_config(config_path);
        for (const auto& o : overrides)
            apply_override(c, o);
        c.validate();
        return c;
    }
};

/// Thread budget: --threads wins, then ICREG_THREADS, then hardware.
int thread_budget(int flag)
{
    if (flag > 0)
        return flag;
    if (const char* env = std::getenv("ICREG_THREADS")) {
        try {
            std::size_t used = 0;
            const int n = std::stoi(env, &used);
            if (used == std::string_view(env).size() && n > 0)
                return n;
        } catch (const std::exception&) {
        }
        throw Error(std::string("ICREG_THREADS='") + env + "' is not a positive integer");
    }
    return int(std::max(1u, std::thread::hardware_concurrency()));
}

void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error(path + ": cannot open for writing");
    out << text;
    if (!out)
        throw Error(path + ": write failed");
}

struct RegisterCase {
    std::string moving, fixed, out_field, out_warped, init_field;
    std::string report_json, report_text;
};

/// Runs one case and returns the human-readable report.
std::string register_case(const RegisterCase& rc, const PipelineConfig& cfg)
{
    NiftiHeader fixed_header;
    const auto source = read_nifti<double>(rc.moving);
    const auto target = read_nifti<double>(rc.fixed, &fixed_header);
    std::optional<DisplacementField<double>> init;
    if (!rc.init_field.empty())
        init = read_field<double>(rc.init_field);
    auto result = run_pipeline(source, target, init ? &*init : nullptr, cfg);
    result.field.set_spacing(target.spacing());
    write_nifti(result.field, rc.out_field, &fixed_header);
    if (!rc.out_warped.empty()) {
        Volume<double> warped = warp(source, result.field);
        warped.set_spacing(target.spacing());
        write_nifti(warped, rc.out_warped, &fixed_header);
    }
    const std::string text = to_text(result.report);
    if (!rc.report_json.empty())
        write_text(rc.report_json, to_json(result.report).dump(2) + "\n");
    if (!rc.report_text.empty())
        write_text(rc.report_text, text);
    return text;
}

/// Manifest lines: moving fixed out_field out_warped [init_field]
/// ('#' starts a comment). Reports go next to the field as
/// <out_field>.report.json.
std::vector<RegisterCase> read_manifest(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error(path + ": cannot open manifest");
    std::vector<RegisterCase> cases;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        std::istringstream fields(line);
        std::vector<std::string> f;
        for (std::string s; fields >> s;)
            f.push_back(s);
        if (f.empty())
            continue;
        if (f.size() != 4 && f.size() != 5)
            throw Error(path + ":" + std::to_string(line_no) +
                        ": expected 'moving fixed out_field out_warped [init_field]'");
        RegisterCase rc{f[0], f[1], f[2], f[3], f.size() == 5 ? f[4] : "", f[2] + ".report.json", ""};
        cases.push_back(std::move(rc));
    }
    if (cases.empty())
        throw Error(path + ": manifest lists no cases");
    return cases;
}

int run_batch(const std::vector<RegisterCase>& cases, const PipelineConfig& cfg, int threads, bool quiet)
{
    const int workers = std::max(1, std::min(threads, int(cases.size())));
    const int inner = std::max(1, threads / workers);
    std::atomic<std::size_t> next{0};
    std::atomic<int> failures{0};
    std::mutex io;
    auto work = [&] {
        detail::set_thread_count(inner);
        for (std::size_t i = next++; i < cases.size(); i = next++) {
            try {
                const std::string text = register_case(cases[i], cfg);
                if (!quiet) {
                    std::lock_guard lock(io);
                    std::cout << "== " << cases[i].moving << " -> " << cases[i].fixed << "\n" << text;
                }
            } catch (const std::exception& e) {
                ++failures;
                std::lock_guard lock(io);
                std::cerr << "error: case " << (i + 1) << " (" << cases[i].moving << "): " << e.what() << "\n";
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back(work);
    for (auto& t : pool)
        t.join();
    return failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"icreg: multi-channel deformable registration with inverse-consistency weighting"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");
    int threads_flag = 0;
    bool quiet = false;
    app.add_option("--threads", threads_flag, "Thread count (default: ICREG_THREADS or hardware)")
        ->check(CLI::PositiveNumber);
    app.add_flag("-q,--quiet", quiet, "Do not print reports");

    // register
    auto* reg = app.add_subcommand("register", "Full pipeline: affine, nonrigid, inverse-consistency weighting");
    RegisterCase rc;
    std::string batch;
    ConfigArgs reg_cfg;
    reg->add_option("--moving", rc.moving, "Moving (source) volume");
    reg->add_option("--fixed", rc.fixed, "Fixed (target) volume");
    reg->add_option("--out-field", rc.out_field, "Output displacement field");
    reg->add_option("--out-warped", rc.out_warped, "Output warped moving volume");
    reg->add_option("--init-field", rc.init_field, "Initial field; skips the affine stage");
    reg->add_option("--report", rc.report_json, "Structured report (JSON)");
    reg->add_option("--report-text", rc.report_text, "Plain-text report");
    reg->add_option("--batch", batch, "Manifest of cases: moving fixed out_field out_warped [init_field]");
    reg_cfg.attach(reg);

    // affine
    auto* aff = app.add_subcommand("affine", "Affine stage only");
    std::string aff_moving, aff_fixed, aff_field, aff_matrix, aff_warped;
    ConfigArgs aff_cfg;
    aff->add_option("--moving", aff_moving, "Moving volume")->required();
    aff->add_option("--fixed", aff_fixed, "Fixed volume")->required();
    aff->add_option("--out-field", aff_field, "Output displacement field of the affine map");
    aff->add_option("--out-matrix", aff_matrix, "Output 3x4 matrix (JSON, voxel coordinates)");
    aff->add_option("--out-warped", aff_warped, "Output warped moving volume");
    aff_cfg.attach(aff);

    // warp
    auto* wrp = app.add_subcommand("warp", "Apply a displacement field to a volume or landmark file");
    std::string w_volume, w_landmarks, w_field, w_out;
    bool w_one_based = false;
    auto* w_vol_opt = wrp->add_option("--volume", w_volume, "Volume to warp: out(x) = in(x + u(x))");
    auto* w_lm_opt = wrp->add_option("--landmarks", w_landmarks, "Landmark CSV to move: p + u(p)");
    w_vol_opt->excludes(w_lm_opt);
    wrp->add_option("--field", w_field, "Displacement field")->required();
    wrp->add_option("--out", w_out, "Output path")->required();
    wrp->add_flag("--one-based", w_one_based, "Landmark coordinates are 1-based");

    // ic-map
    auto* icm = app.add_subcommand("ic-map", "Inverse-consistency error map and weight mask");
    std::string ic_fwd, ic_bwd, ic_mask_out, ic_map_out;
    double ic_sigma = 2.0, ic_power = 2.0;
    icm->add_option("--forward", ic_fwd, "Source-to-target field")->required();
    icm->add_option("--backward", ic_bwd, "Target-to-source field")->required();
    icm->add_option("--sigma", ic_sigma, "Gaussian sigma in voxels")->capture_default_str()->check(CLI::NonNegativeNumber);
    icm->add_option("--power", ic_power, "Exponent")->capture_default_str()->check(CLI::PositiveNumber);
    icm->add_option("--out-mask", ic_mask_out, "Output weight mask")->required();
    icm->add_option("--out-map", ic_map_out, "Output raw error map");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Landmark scores: median error and robustness");
    std::string ev_warped, ev_target, ev_before, ev_field, ev_reference, ev_json, ev_case = "case";
    std::vector<double> ev_spacing;
    bool ev_one_based = false;
    ev->add_option("--warped-lm", ev_warped, "Target landmarks after warping")->required();
    ev->add_option("--target-lm", ev_target, "Reference (source) landmarks")->required();
    ev->add_option("--before-lm", ev_before, "Target landmarks before warping")->required();
    ev->add_option("--spacing", ev_spacing, "Voxel spacing in mm (3 values)")->expected(3);
    ev->add_option("--reference", ev_reference, "Take spacing from this NIfTI header");
    ev->add_option("--field", ev_field, "Field for Jacobian smoothness statistics");
    ev->add_option("--case-id", ev_case, "Case identifier for the table row")->capture_default_str();
    ev->add_option("--json", ev_json, "Also write the score as JSON");
    ev->add_flag("--one-based", ev_one_based, "Landmark coordinates are 1-based");

    // compose
    auto* cmp = app.add_subcommand("compose", "Compose two fields: inner(x) + outer(x + inner(x))");
    std::string c_outer, c_inner, c_out;
    cmp->add_option("--outer", c_outer, "Outer field")->required();
    cmp->add_option("--inner", c_inner, "Inner field")->required();
    cmp->add_option("--out", c_out, "Output field")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        const int threads = thread_budget(threads_flag);
        detail::set_thread_count(threads);

        if (*reg) {
            const PipelineConfig cfg = reg_cfg.load();
            if (!batch.empty()) {
                if (!rc.moving.empty() || !rc.fixed.empty() || !rc.out_field.empty()) {
                    std::cerr << "error: --batch cannot be combined with --moving/--fixed/--out-field\n";
                    return 2;
                }
                return run_batch(read_manifest(batch), cfg, threads, quiet);
            }
            if (rc.moving.empty() || rc.fixed.empty() || rc.out_field.empty()) {
                std::cerr << "error: register needs --moving, --fixed and --out-field (or --batch)\n";
                return 2;
            }
            const std::string text = register_case(rc, cfg);
            if (!quiet)
                std::cout << text;
        } else if (*aff) {
            const PipelineConfig cfg = aff_cfg.load();
            if (aff_field.empty() && aff_matrix.empty() && aff_warped.empty()) {
                std::cerr << "error: affine needs at least one of --out-field, --out-matrix, --out-warped\n";
                return 2;
            }
            NiftiHeader fixed_header;
            const auto source = normalize_channels(read_nifti<double>(aff_moving));
            const auto target = normalize_channels(read_nifti<double>(aff_fixed, &fixed_header));
            if (source.channels() != target.channels())
                throw Error("moving has " + std::to_string(source.channels()) + " channels, fixed has " +
                            std::to_string(target.channels()));
            const auto r = detail::run_stage("affine", [&] {
                return affine_register(source, target, cfg.affine, cfg.epsilon);
            });
            const auto u = affine_to_field<double>(r.transform, target.dims(), target.spacing());
            if (!aff_field.empty())
                write_nifti(u, aff_field, &fixed_header);
            if (!aff_matrix.empty())
                write_text(aff_matrix, to_json(r.transform).dump(2) + "\n");
            if (!aff_warped.empty()) {
                Volume<double> warped = warp(read_nifti<double>(aff_moving), u);
                warped.set_spacing(target.spacing());
                write_nifti(warped, aff_warped, &fixed_header);
            }
            for (const auto& w : r.warnings)
                std::cerr << "warning: " << w << "\n";
            if (!quiet)
                std::cout << to_json(r.transform).dump() << "\n";
        } else if (*wrp) {
            NiftiHeader field_header;
            const auto u = read_field<double>(w_field, &field_header);
            if (!w_volume.empty()) {
                NiftiHeader h;
                const auto v = read_nifti<double>(w_volume, &h);
                write_nifti(warp(v, u), w_out, &h);
            } else if (!w_landmarks.empty()) {
                const auto moved = warp_landmarks(read_landmarks(w_landmarks, w_one_based ? -1.0 : 0.0), u);
                for (const auto& id : moved.clamped)
                    std::cerr << "warning: landmark " << id << " lies outside the field grid; clamped\n";
                write_landmarks(moved.points, w_out);
            } else {
                std::cerr << "error: warp needs --volume or --landmarks\n";
                return 2;
            }
        } else if (*icm) {
            NiftiHeader h;
            const auto fwd = read_field<double>(ic_fwd, &h);
            const auto bwd = read_field<double>(ic_bwd);
            const auto map = ic_error_map(fwd, bwd);
            const auto mask = ic_weight_mask(map, ic_sigma, ic_power);
            write_nifti(mask.grid(), ic_mask_out, &h);
            if (!ic_map_out.empty())
                write_nifti(map, ic_map_out, &h);
            if (!quiet) {
                const auto d = mask.diagnostics();
                std::cout << "mask: mean " << d.mean << ", min " << d.min << ", max " << d.max
                          << ", fraction < 0.5 " << d.fraction_below_half << "\n";
            }
        } else if (*ev) {
            Vec3 spacing{1, 1, 1};
            const char* unit = "voxel";
            if (!ev_spacing.empty() && !ev_reference.empty()) {
                std::cerr << "error: give --spacing or --reference, not both\n";
                return 2;
            }
            if (!ev_spacing.empty()) {
                spacing = {ev_spacing[0], ev_spacing[1], ev_spacing[2]};
                unit = "mm";
            } else if (!ev_reference.empty()) {
                const NiftiHeader h = read_nifti_header(ev_reference);
                if (h.has_spacing()) {
                    spacing = h.spacing();
                    unit = "mm";
                }
            }
            const double offset = ev_one_based ? -1.0 : 0.0;
            CaseScore s = score_case(ev_case, read_landmarks(ev_warped, offset), read_landmarks(ev_before, offset),
                                     read_landmarks(ev_target, offset), spacing);
            if (!ev_field.empty())
                s.smoothness = jacobian_stats(read_field<double>(ev_field));
            if (std::string(unit) == "voxel")
                std::cerr << "warning: no spacing given; distances are in voxels\n";
            std::cout << score_table_header << "\n";
            write_score_row(std::cout, s);
            if (!ev_json.empty())
                write_text(ev_json, to_json(s, unit).dump(2) + "\n");
        } else if (*cmp) {
            NiftiHeader h;
            const auto outer = read_field<double>(c_outer);
            const auto inner = read_field<double>(c_inner, &h);
            write_nifti(compose(outer, inner), c_out, &h);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
