// meshflow: variational mesh adaptation driver.
//
// Subcommands:
//   run            adapt a uniform initial mesh to an example field
//   gradient-check verify the assembled gradient against finite differences
//   quality        report quality measures for an existing mesh file
//   render         render a mesh file to SVG
//
// Exit codes: 0 success, 2 configuration error, 3 integrator stagnation,
// 4 mesh I/O error.

#include "meshflow/fields.hpp"
#include "meshflow/io.hpp"
#include "meshflow/metric.hpp"
#include "meshflow/mmpde.hpp"
#include "meshflow/quality.hpp"
#include "meshflow/svg.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

using namespace meshflow;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStagnation = 3;
constexpr int kExitMeshIo = 4;

struct RunConfig {
    std::string example = "sine_wave_30";
    std::string functional = "new";
    double theta = 1.0 / 3.0;
    double p = -1.0;  // -1: per-functional default
    int grid = 29;
    double t_final = -1.0;  // -1: per-example default
    double tau = 1e-2;
    std::string out_dir = ".";
    bool metric_refresh = true;
    MmpdeConfig mmpde;
    HessianRecoveryConfig metric;
};

double default_t_final(const std::string& example) {
    if (example == "sine_wave_100") return 0.1;
    if (example == "five_spheres") return 0.5;
    return 5.0;
}

FunctionalSpec make_spec(const RunConfig& cfg) {
    if (cfg.functional == "new")
        return FunctionalSpec::combined(cfg.p > 0 ? cfg.p : 1.0);
    if (cfg.functional == "existing")
        return FunctionalSpec::existing(cfg.theta, cfg.p > 0 ? cfg.p : 1.5);
    throw CLI::ValidationError("--functional must be 'new' or 'existing'");
}

void load_json_config(const std::string& path, RunConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw CLI::ValidationError(std::string("config parse error: ") + e.what());
    }
    cfg.example = j.value("example", cfg.example);
    cfg.functional = j.value("functional", cfg.functional);
    cfg.theta = j.value("theta", cfg.theta);
    cfg.p = j.value("p", cfg.p);
    cfg.grid = j.value("grid", cfg.grid);
    cfg.t_final = j.value("t_final", cfg.t_final);
    cfg.tau = j.value("tau", cfg.tau);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.metric_refresh = j.value("metric_refresh", cfg.metric_refresh);
    cfg.mmpde.dt_init = j.value("dt_init", cfg.mmpde.dt_init);
    cfg.mmpde.dt_max = j.value("dt_max", cfg.mmpde.dt_max);
    cfg.metric.eigen_floor = j.value("eigen_floor", cfg.metric.eigen_floor);
    cfg.metric.patch_depth = j.value("patch_depth", cfg.metric.patch_depth);
}

int cmd_run(const RunConfig& cfg) {
    if (cfg.grid < 4) {
        std::cerr << "error: --grid must be >= 4\n";
        return kExitConfig;
    }
    const double t_final = cfg.t_final > 0 ? cfg.t_final : default_t_final(cfg.example);
    const auto spec = make_spec(cfg);
    const auto field = example_field(cfg.example);
    const auto ref = build_reference_element<2>();

    MetricRefreshFn<2> refresh = [&](const SimplicialMesh<2>& m) {
        return build_metric(m, build_reference_element<2>(), sample_nodal(m, field), cfg.metric);
    };
    auto mesh = uniform_square_mesh(cfg.grid);
    auto metric = refresh(mesh);

    MmpdeConfig mcfg = cfg.mmpde;
    mcfg.tau = cfg.tau;
    mcfg.t_final = t_final;
    mcfg.metric_refresh = cfg.metric_refresh;

    std::cout << "example " << cfg.example << ", functional " << cfg.functional << ", N = "
              << mesh.num_elements() << ", t_final = " << t_final << "\n";

    IntegrateResult<2> out;
    try {
        out = integrate(std::move(mesh), std::move(metric), spec, mcfg, refresh);
    } catch (const StagnationError& e) {
        std::cerr << "stagnation: " << e.what() << "\n";
        return kExitStagnation;
    }

    auto quality = quality_measures(out.mesh, ref, out.metric);
    quality.l2_error = l2_interpolation_error(out.mesh, field);

    namespace fs = std::filesystem;
    const fs::path dir(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    try {
        write_mesh_file((dir / "mesh_final.txt").string(), out.mesh);
        std::ofstream traj(dir / "trajectory.csv");
        write_trajectory_csv(traj, out.record);
        std::ofstream q(dir / "quality.csv");
        write_quality_csv(q, cfg.functional, quality);
        std::ofstream svg(dir / "mesh.svg");
        svg << render_svg(out.mesh);
        if (!traj || !q || !svg) throw MeshIoError("short write in output directory");
    } catch (const std::exception& e) {
        std::cerr << "output error: " << e.what() << "\n";
        return kExitMeshIo;
    }

    std::cout << "accepted " << out.record.accepted << " steps, rejected " << out.record.rejected
              << ", final I_h = " << out.record.energies.back() << "\n";
    write_quality_csv(std::cout, cfg.functional, quality);
    return 0;
}

int cmd_gradient_check(const RunConfig& cfg) {
    const auto spec = make_spec(cfg);
    const auto ref = build_reference_element<2>();
    const auto field = example_field(cfg.example);
    std::mt19937 rng(12345);

    double worst = 0.0;
    const int grid = cfg.grid > 0 ? cfg.grid : 4;
    for (int trial = 0; trial < 5; ++trial) {
        auto mesh = uniform_square_mesh(grid);
        std::uniform_real_distribution<double> uni(-0.2 / grid, 0.2 / grid);
        for (int i = 0; i < mesh.num_vertices(); ++i)
            if (mesh.boundary[i].cls == VertexClass::Interior)
                mesh.vertices[i] += Eigen::Vector2d(uni(rng), uni(rng));
        mesh.refresh_degeneracy_tol();
        const auto metric = build_metric(mesh, ref, sample_nodal(mesh, field), cfg.metric);
        const double gamma = gamma_h(sigma_h(mesh, ref, metric), mesh.num_elements(), 2);
        const auto grad = assemble_gradient(mesh, ref, metric, spec, gamma);
        const double scale = energy(mesh, ref, metric, spec, gamma).I_h + 1.0;
        const double h = 1e-6;
        for (int i = 0; i < mesh.num_vertices(); ++i)
            for (int a = 0; a < 2; ++a) {
                auto plus = mesh.vertices, minus = mesh.vertices;
                plus[i][a] += h;
                minus[i][a] -= h;
                const double fd = (energy_at_displaced(mesh, ref, metric, spec, gamma, plus) -
                                   energy_at_displaced(mesh, ref, metric, spec, gamma, minus)) /
                                  (2 * h);
                worst = std::max(worst, std::abs(grad[i][a] + fd) / (std::abs(fd) + scale));
            }
    }
    std::cout << "max relative gradient error: " << worst << "\n";
    return worst < 1e-6 ? 0 : 1;
}

int cmd_quality(const std::string& mesh_path, const RunConfig& cfg) {
    SimplicialMesh<2> mesh;
    try {
        mesh = read_mesh_file<2>(mesh_path);
    } catch (const std::exception& e) {
        std::cerr << "mesh I/O error: " << e.what() << "\n";
        return kExitMeshIo;
    }
    const auto ref = build_reference_element<2>();
    const auto field = example_field(cfg.example);
    auto quality =
        quality_measures(mesh, ref, build_metric(mesh, ref, sample_nodal(mesh, field), cfg.metric));
    quality.l2_error = l2_interpolation_error(mesh, field);
    write_quality_csv(std::cout, cfg.functional, quality);
    return 0;
}

int cmd_render(const std::string& mesh_path, const std::string& out_path, const Viewport& vp) {
    SimplicialMesh<2> mesh;
    try {
        mesh = read_mesh_file<2>(mesh_path);
    } catch (const std::exception& e) {
        std::cerr << "mesh I/O error: " << e.what() << "\n";
        return kExitMeshIo;
    }
    std::ofstream out(out_path);
    if (!out) {
        std::cerr << "cannot open output file: " << out_path << "\n";
        return kExitMeshIo;
    }
    out << render_svg(mesh, vp);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"variational mesh adaptation driver"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string config_path;
    bool no_refresh = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--example", cfg.example,
                        "field: sine_wave_30 | sine_wave_100 | five_spheres");
        sub->add_option("--functional", cfg.functional, "new | existing");
        sub->add_option("--theta", cfg.theta, "theta for the existing functional");
        sub->add_option("--p", cfg.p, "exponent p");
        sub->add_option("--grid", cfg.grid, "initial n x n grid parameter");
    };

    auto* run = app.add_subcommand("run", "adapt a mesh to an example field");
    add_common(run);
    run->add_option("--t-final", cfg.t_final, "integration end time");
    run->add_option("--tau", cfg.tau, "mmpde time scale");
    run->add_option("--out-dir", cfg.out_dir, "artifact directory");
    run->add_option("--config", config_path, "JSON config file");
    run->add_flag("--no-metric-refresh", no_refresh, "freeze the initial metric");

    auto* gc = app.add_subcommand("gradient-check", "finite-difference gradient verification");
    add_common(gc);

    std::string mesh_path, out_path = "mesh.svg";
    auto* qual = app.add_subcommand("quality", "quality measures of a mesh file");
    qual->add_option("mesh", mesh_path, "mesh file")->required();
    add_common(qual);

    Viewport vp;
    auto* render = app.add_subcommand("render", "render a mesh file to SVG");
    render->add_option("mesh", mesh_path, "mesh file")->required();
    render->add_option("--out", out_path, "output SVG path");
    render->add_option("--xmin", vp.xmin);
    render->add_option("--xmax", vp.xmax);
    render->add_option("--ymin", vp.ymin);
    render->add_option("--ymax", vp.ymax);
    render->add_option("--width", vp.width_px, "image width in pixels");

    try {
        app.parse(argc, argv);
        if (!config_path.empty()) {
            RunConfig file_cfg;  // file first, explicit flags re-applied below
            load_json_config(config_path, file_cfg);
            auto keep = [&](const char* flag) { return run->count(flag) > 0; };
            if (!keep("--example")) cfg.example = file_cfg.example;
            if (!keep("--functional")) cfg.functional = file_cfg.functional;
            if (!keep("--theta")) cfg.theta = file_cfg.theta;
            if (!keep("--p")) cfg.p = file_cfg.p;
            if (!keep("--grid")) cfg.grid = file_cfg.grid;
            if (!keep("--t-final")) cfg.t_final = file_cfg.t_final;
            if (!keep("--tau")) cfg.tau = file_cfg.tau;
            if (!keep("--out-dir")) cfg.out_dir = file_cfg.out_dir;
            cfg.metric_refresh = file_cfg.metric_refresh;
            cfg.mmpde = file_cfg.mmpde;
            cfg.metric = file_cfg.metric;
        }
        if (no_refresh) cfg.metric_refresh = false;

        if (run->parsed()) return cmd_run(cfg);
        if (gc->parsed()) return cmd_gradient_check(cfg);
        if (qual->parsed()) return cmd_quality(mesh_path, cfg);
        if (render->parsed()) return cmd_render(mesh_path, out_path, vp);
        return kExitConfig;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
