#include "corebody/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "corebody/service.hpp"

namespace corebody {

namespace {

struct CommonOptions {
    std::string assets;
    std::string config;
    std::string mode;
};

SessionConfig base_config(const CommonOptions& o) {
    SessionConfig c = o.config.empty() ? SessionConfig{} : load_config(o.config);
    if (!o.assets.empty()) c.asset_path = o.assets;
    if (!o.mode.empty()) c.mode = mode_from_name(o.mode);
    c.validate();
    return c;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Pipeline {
    SessionConfig config;
    BodyModelAssets assets;
    TargetState target;
};

Pipeline prepare(const CommonOptions& common, const std::string& target_log) {
    Pipeline p{base_config(common), {}, {}};
    p.config.target_frame.reset();
    p.config.target_poselog = target_log;
    p.assets = load_session_assets(p.config);
    p.target = set_target(p.assets, p.config, resolve_target_frame(p.config));
    return p;
}

SessionHooks stderr_diagnostics() {
    SessionHooks hooks;
    hooks.on_diagnostic = [](const std::string& msg) { std::cerr << "corebody: " << msg << '\n'; };
    return hooks;
}

int cmd_eval(const CommonOptions& common, const std::string& target_log, const std::string& session_log) {
    const Pipeline p = prepare(common, target_log);
    std::ifstream in(session_log);
    if (!in) throw Error("cannot open " + session_log);
    ReplayStream frames(in, p.config.shape_limit);
    std::cout << format_report(run_session(p.assets, p.config, p.target, frames, stderr_diagnostics()));
    return 0;
}

int cmd_replay(const CommonOptions& common, const std::string& target_log, const std::string& session_log,
               const std::string& speed) {
    const Pipeline p = prepare(common, target_log);
    std::ifstream in(session_log);
    if (!in) throw Error("cannot open " + session_log);
    ReplayStream replay(in, p.config.shape_limit);
    PacedStream paced(replay);
    FrameStream& frames = speed == "realtime" ? static_cast<FrameStream&>(paced) : replay;

    const auto dir = create_session_dir();
    write_text_file(dir / "config.json", config_to_json(p.config).dump(2) + "\n");
    const SessionReport report = record_session(p.assets, p.config, p.target, frames, dir, stderr_diagnostics());
    std::cerr << "corebody: session written to " << dir.string() << '\n';
    std::cout << format_report(report);
    return 0;
}

int cmd_gen_assets(std::uint64_t seed, int n_ring, const std::string& out, bool as_json) {
    const BodyModelAssets a = generate_test_assets(n_ring, seed);
    if (out.empty() || out == "-") {
        if (as_json) write_assets_json(std::cout, a);
        else write_assets_binary(std::cout, a);
        return 0;
    }
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + out);
    if (as_json) write_assets_json(f, a);
    else write_assets_binary(f, a);
    f.flush();
    if (!f) throw Error("failed writing " + out);
    return 0;
}

int cmd_convert_report(const std::string& in, const std::string& out) {
    const SessionReport r = parse_report(read_file(in));
    const std::string csv = format_series_csv(r.samples);
    if (out.empty() || out == "-") std::cout << csv;
    else write_text_file(out, csv);
    return 0;
}

int cmd_serve(const CommonOptions& common, const std::string& bind, const std::string& ui_dir,
              const std::string& source, const std::string& speed) {
    ServiceOptions opts;
    const auto colon = bind.rfind(':');
    if (colon == std::string::npos) throw ConfigError("--bind expects addr:port");
    opts.address = bind.substr(0, colon);
    try {
        const int port = std::stoi(bind.substr(colon + 1));
        if (port < 0 || port > 65535) throw std::out_of_range("port");
        opts.port = static_cast<unsigned short>(port);
    } catch (const std::logic_error&) {
        throw ConfigError("invalid port in --bind " + bind);
    }
    opts.ui_dir = ui_dir;

    // Worker threads inherit the mask, so only sigwait below sees these.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    Service service(base_config(common), opts);
    service.start();
    std::cerr << "corebody: listening on http://" << opts.address << ':' << service.port() << '\n';
    if (!source.empty()) service.start_session(source, speed == "realtime");

    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "corebody: shutting down\n";
    service.stop();
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Core-training guidance engine: body meshes, marker guidance and session metrics"};
    app.name("corebody");
    app.require_subcommand(1);
    app.fallthrough();

    CommonOptions common;
    app.add_option("--assets", common.assets, "Body model assets (CBM1 binary or JSON); default: generated test body");
    app.add_option("--config", common.config, "Session config JSON")->check(CLI::ExistingFile);
    app.add_option("--mode", common.mode, "Guidance mode")->check(CLI::IsMember({"skeleton", "markers"}));

    std::string speed = "max";
    const auto speed_check = CLI::IsMember({"realtime", "max"});

    auto* serve = app.add_subcommand("serve", "Run the live guidance service");
    std::string bind = "127.0.0.1:8080", ui_dir, source;
    serve->add_option("--bind", bind, "Listen address addr:port")->capture_default_str();
    serve->add_option("--ui", ui_dir, "Directory with the built viewer UI")->check(CLI::ExistingDirectory);
    serve->add_option("--source", source, "Start a session at launch: file:<poselog>, tcp://host:port or exec:<cmd>");
    serve->add_option("--speed", speed, "Pacing for file sources")->check(speed_check)->capture_default_str();

    auto* eval = app.add_subcommand("eval", "Offline metrics for a recorded session; prints the report");
    std::string target_log, session_log;
    eval->add_option("target", target_log, "Target .poselog (frame index from config, default 0)")
        ->required()
        ->check(CLI::ExistingFile);
    eval->add_option("session", session_log, "Session .poselog")->required()->check(CLI::ExistingFile);

    auto* replay = app.add_subcommand("replay", "Stream a .poselog through the pipeline and persist the session");
    replay->add_option("target", target_log, "Target .poselog")->required()->check(CLI::ExistingFile);
    replay->add_option("session", session_log, "Session .poselog")->required()->check(CLI::ExistingFile);
    replay->add_option("--speed", speed, "Replay pacing")->check(speed_check)->capture_default_str();

    auto* gen = app.add_subcommand("gen-assets", "Write the deterministic test body");
    std::uint64_t seed = kDefaultTestSeed;
    int n_ring = kDefaultTestRing;
    std::string out;
    bool as_json = false;
    gen->add_option("--seed", seed, "Generator seed")->capture_default_str();
    gen->add_option("--n-ring", n_ring, "Vertices per tube ring")->check(CLI::Range(3, 4096))->capture_default_str();
    gen->add_option("-o,--output", out, "Output file (default stdout)");
    gen->add_flag("--json", as_json, "Write the JSON mirror format instead of CBM1");

    auto* convert = app.add_subcommand("convert-report", "Convert a report JSON into an RMSE series CSV");
    std::string report_in;
    convert->add_option("report", report_in, "report.json")->required()->check(CLI::ExistingFile);
    convert->add_option("-o,--output", out, "Output CSV (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "corebody: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*serve) return cmd_serve(common, bind, ui_dir, source, speed);
        if (*eval) return cmd_eval(common, target_log, session_log);
        if (*replay) return cmd_replay(common, target_log, session_log, speed);
        if (*gen) return cmd_gen_assets(seed, n_ring, out, as_json);
        if (*convert) return cmd_convert_report(report_in, out);
    } catch (const std::exception& e) {
        std::cerr << "corebody: error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace corebody
