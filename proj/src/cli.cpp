#include "hsprobe/cli.hpp"

#include "hsprobe/feature_store.hpp"
#include "hsprobe/metrics.hpp"
#include "hsprobe/probes.hpp"
#include "hsprobe/report.hpp"
#include "hsprobe/router.hpp"
#include "hsprobe/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

namespace hsprobe {

using nlohmann::json;

int exit_code_for(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::io:
        return exit_io;
    case ErrorKind::bad_magic:
    case ErrorKind::version_mismatch:
    case ErrorKind::truncated:
    case ErrorKind::non_finite:
    case ErrorKind::corrupt:
        return exit_format;
    case ErrorKind::one_class:
        return exit_one_class;
    case ErrorKind::invalid_argument:
    case ErrorKind::dimension_mismatch:
    case ErrorKind::shape_mismatch:
    case ErrorKind::rank_deficient:
    case ErrorKind::mode_mismatch:
        return exit_invalid_argument;
    }
    return exit_other;
}

namespace {

// --config accepts the JSON config echo ({"<command>": {"<flag>": value}})
// or CLI11's TOML/INI form.
class JsonOrTomlConfig : public CLI::ConfigTOML {
public:
    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        std::string text((std::istreambuf_iterator<char>(input)), std::istreambuf_iterator<char>());
        const auto first = text.find_first_not_of(" \t\r\n");
        if (first == std::string::npos || text[first] != '{') {
            std::istringstream again(text);
            return CLI::ConfigTOML::from_config(again);
        }
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw CLI::ConversionError("config", std::string("invalid JSON config: ") + e.what());
        }
        std::vector<CLI::ConfigItem> items;
        flatten(j, {}, items);
        return items;
    }

private:
    static std::string scalar(const json& v) {
        return v.is_string() ? v.get<std::string>() : v.dump();
    }

    static void flatten(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& items) {
        for (const auto& [key, value] : j.items()) {
            if (value.is_object()) {
                auto p = parents;
                p.push_back(key);
                flatten(value, p, items);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = key;
            if (value.is_array()) {
                for (const auto& v : value) {
                    item.inputs.push_back(scalar(v));
                }
            } else {
                item.inputs.push_back(scalar(value));
            }
            items.push_back(std::move(item));
        }
    }
};

json config_echo(const CLI::App& sub) {
    json opts = json::object();
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help") {
            continue;
        }
        std::vector<std::string> values = opt->results();
        if (values.empty()) {
            const std::string d = opt->get_default_str();
            if (d.empty()) {
                continue;
            }
            values.push_back(d);
        }
        if (opt->get_expected_max() > 1 || values.size() > 1) {
            opts[name] = values;
        } else {
            opts[name] = values.front();
        }
    }
    return json{{sub.get_name(), opts}};
}

json nullable(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

double from_nullable(const json& v) {
    return v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
}

json to_json(const EvalReport& r) {
    json roc = json::array();
    for (const auto& p : r.roc) {
        roc.push_back({{"fpr", p.fpr}, {"tpr", p.tpr}, {"threshold", nullable(p.threshold)}});
    }
    json rac = json::array();
    for (const auto& p : r.rac) {
        rac.push_back(
            {{"coverage", p.coverage}, {"accuracy", p.accuracy}, {"threshold", p.threshold}, {"retained", p.retained}});
    }
    return {{"count", r.count},  {"positives", r.positives}, {"auroc", r.auroc}, {"aurac", r.aurac},
            {"accuracy", r.accuracy}, {"roc", roc},           {"rac", rac}};
}

json to_json(const TrainHistory& h) {
    json epochs = json::array();
    for (const auto& e : h.epochs) {
        epochs.push_back({{"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_auroc", e.val_auroc}});
    }
    return {{"best_epoch", h.best_epoch}, {"wall_seconds", h.wall_seconds}, {"epochs", epochs}};
}

json to_json(const std::vector<LayerSweepRow>& rows) {
    json out = json::array();
    for (const auto& r : rows) {
        out.push_back({{"layer", r.layer},
                       {"auroc", r.auroc},
                       {"aurac", r.aurac},
                       {"accuracy", r.accuracy},
                       {"test_count", r.test_count},
                       {"best_epoch", r.best_epoch}});
    }
    return out;
}

json to_json(const std::vector<TruncationPoint>& pts) {
    json out = json::array();
    for (const auto& p : pts) {
        out.push_back({{"fraction", p.fraction},
                       {"auroc", p.report.auroc},
                       {"aurac", p.report.aurac},
                       {"accuracy", p.report.accuracy},
                       {"count", p.report.count}});
    }
    return out;
}

json to_json(const StrategyStats& s) {
    return {{"mean_latency", s.mean_latency}, {"accuracy", s.accuracy}, {"fallback_count", s.fallback_count}};
}

json read_json(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt, path + ": invalid JSON: " + e.what());
    }
}

void emit(const json& result, const std::string& out_path, std::ostream& out) {
    if (!out_path.empty()) {
        write_text(out_path, result.dump(2) + "\n");
    }
    out << result.dump(2) << "\n";
}

// Training options shared by train, layer-sweep and ood.
struct TrainOptions {
    std::string arch = "mlp";
    std::string pooling = "mean";
    std::string mode = "question_only";
    std::size_t hidden_dim = 512;
    std::size_t layers = 4;
    std::size_t model_dim = 256;
    std::size_t heads = 0;
    std::size_t ff_dim = 0;
    bool no_positional = false;
    double lr = 1e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 100;
    std::size_t patience = 10;
    double pos_weight = 0.0;  // 0: off
    double split_train = 0.8;
    double split_val = 0.1;
    double split_test = 0.1;

    void add(CLI::App* app) {
        app->add_option("--arch", arch, "mlp | transformer")->check(CLI::IsMember({"mlp", "transformer"}));
        app->add_option("--pooling", pooling, "MLP pooling: mean | max | last | pca:<n>");
        app->add_option("--mode", mode, "question_only | question_and_answer")
            ->check(CLI::IsMember({"question_only", "question_and_answer"}));
        app->add_option("--hidden-dim", hidden_dim, "MLP hidden width")->check(CLI::PositiveNumber);
        app->add_option("--layers", layers, "MLP linear layers or transformer blocks")->check(CLI::PositiveNumber);
        app->add_option("--model-dim", model_dim, "transformer width")->check(CLI::PositiveNumber);
        app->add_option("--heads", heads, "attention heads (0: model_dim / 64)");
        app->add_option("--ff-dim", ff_dim, "feed-forward width (0: 4 * model_dim)");
        app->add_flag("--no-positional", no_positional, "disable sinusoidal positions");
        app->add_option("--lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
        app->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
        app->add_option("--epochs", epochs, "maximum epochs")->check(CLI::PositiveNumber);
        app->add_option("--patience", patience, "early-stopping patience")->check(CLI::PositiveNumber);
        app->add_option("--pos-weight", pos_weight, "positive-class loss weight (0: off)")->check(CLI::NonNegativeNumber);
        app->add_option("--split-train", split_train)->check(CLI::Range(0.0, 1.0));
        app->add_option("--split-val", split_val)->check(CLI::Range(0.0, 1.0));
        app->add_option("--split-test", split_test)->check(CLI::Range(0.0, 1.0));
    }

    ProbeSpec spec() const {
        ProbeSpec s;
        s.arch = parse_architecture(arch);
        s.mode = parse_segment_mode(mode);
        s.pooling = parse_pooling(pooling);
        s.mlp.hidden_dim = hidden_dim;
        s.mlp.n_layers = layers;
        s.transformer.model_dim = model_dim;
        s.transformer.n_layers = layers;
        s.transformer.n_heads = heads;
        s.transformer.ff_dim = ff_dim;
        s.transformer.positional_encoding = !no_positional;
        return s;
    }

    TrainConfig config(std::uint64_t seed) const {
        TrainConfig c;
        c.learning_rate = lr;
        c.batch_size = batch_size;
        c.max_epochs = epochs;
        c.patience = patience;
        c.seed = seed;
        if (pos_weight > 0.0) {
            c.positive_weight = pos_weight;
        }
        return c;
    }

    SplitSpec split_spec(std::uint64_t seed) const { return {split_train, split_val, split_test, seed}; }
};

std::atomic<RouterServer*> g_server{nullptr};

extern "C" void on_signal(int) {
    if (auto* s = g_server.load()) {
        s->stop();
    }
}

ScoredSet read_trace_csv(const std::string& path, std::vector<std::size_t>& lengths) {
    std::ifstream f(path);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open " + path);
    ScoredSet set;
    std::string line;
    std::getline(f, line);
    require(line.rfind("p,label,answer_tokens", 0) == 0, ErrorKind::corrupt,
            path + ": expected header 'p,label,answer_tokens'");
    std::size_t row = 1;
    while (std::getline(f, line)) {
        ++row;
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        std::string p, y, n;
        if (!std::getline(ss, p, ',') || !std::getline(ss, y, ',') || !std::getline(ss, n)) {
            fail(ErrorKind::corrupt, path + ": row " + std::to_string(row) + " needs three fields");
        }
        try {
            set.scores.push_back(std::stod(p));
            const int label = std::stoi(y);
            require(label == 0 || label == 1, ErrorKind::corrupt, path + ": labels must be 0 or 1");
            set.labels.push_back(static_cast<std::uint8_t>(label));
            lengths.push_back(std::stoul(n));
        } catch (const std::logic_error&) {
            fail(ErrorKind::corrupt, path + ": row " + std::to_string(row) + " is not numeric");
        }
    }
    return set;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Hidden-state probes for answer-correctness prediction"};
    app.name("hsprobe");
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.config_formatter(std::make_shared<JsonOrTomlConfig>());
    app.fallthrough();
    app.set_config("--config", "", "JSON (config echo) or TOML file with per-command sections");

    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::string out_path;

    // synth
    auto* synth = app.add_subcommand("synth", "write a synthetic HSDS dataset");
    SynthOptions so;
    std::string synth_out, synth_region = "all";
    std::string synth_model = "synthetic";
    std::int64_t synth_layer = 0;
    synth->add_option("--out", synth_out, "output .hsds")->required();
    synth->add_option("--count", so.count)->check(CLI::PositiveNumber);
    synth->add_option("--dim", so.dim)->check(CLI::PositiveNumber);
    synth->add_option("--separation", so.separation)->check(CLI::NonNegativeNumber);
    synth->add_option("--direction-seed", so.direction_seed, "class-direction seed (default: --seed)");
    synth->add_option("--signal", synth_region, "all | answer_tail")->check(CLI::IsMember({"all", "answer_tail"}));
    synth->add_option("--tail-fraction", so.tail_fraction)->check(CLI::Range(0.0, 1.0));
    synth->add_option("--min-question", so.min_question);
    synth->add_option("--max-question", so.max_question);
    synth->add_option("--min-answer", so.min_answer);
    synth->add_option("--max-answer", so.max_answer);
    synth->add_option("--id-prefix", so.id_prefix);
    synth->add_option("--model-name", synth_model);
    synth->add_option("--layer", synth_layer);
    synth->add_option("--seed", seed);

    // validate
    auto* validate_cmd = app.add_subcommand("validate", "check an HSDS file; nonzero exit on violations");
    std::string data;
    validate_cmd->add_option("--data", data)->required();
    validate_cmd->add_option("--out", out_path, "write the report JSON here");

    // split
    auto* split_cmd = app.add_subcommand("split", "stratified train/val/test split into three HSDS files");
    std::string out_dir;
    SplitSpec ss;
    split_cmd->add_option("--data", data)->required();
    split_cmd->add_option("--out-dir", out_dir)->required();
    split_cmd->add_option("--train", ss.train)->check(CLI::Range(0.0, 1.0));
    split_cmd->add_option("--val", ss.val)->check(CLI::Range(0.0, 1.0));
    split_cmd->add_option("--test", ss.test)->check(CLI::Range(0.0, 1.0));
    split_cmd->add_option("--seed", seed);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a probe on a dataset split");
    TrainOptions to;
    std::string probe_path;
    to.add(train_cmd);
    train_cmd->add_option("--data", data, "HSDS file (split internally)")->required();
    train_cmd->add_option("--probe", probe_path, "output checkpoint")->required();
    train_cmd->add_option("--out", out_path, "write history and test report JSON here");
    train_cmd->add_option("--seed", seed);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "score a dataset and report AUROC, AURAC and curves");
    std::string csv_dir;
    eval_cmd->add_option("--probe", probe_path)->required();
    eval_cmd->add_option("--data", data)->required();
    eval_cmd->add_option("--out", out_path, "report JSON (input of `plot roc|rac`)");
    eval_cmd->add_option("--csv-dir", csv_dir, "write roc.csv and rac.csv here");

    // layer-sweep
    auto* sweep_cmd = app.add_subcommand("layer-sweep", "one probe per layer file");
    TrainOptions sweep_to;
    std::vector<std::string> data_files;
    std::string csv_path;
    sweep_to.add(sweep_cmd);
    sweep_cmd->add_option("--data", data_files, "one HSDS file per layer")->required();
    sweep_cmd->add_option("--out", out_path);
    sweep_cmd->add_option("--csv", csv_path);
    sweep_cmd->add_option("--seed", seed);
    sweep_cmd->add_option("--jobs", jobs, "cells trained concurrently")->check(CLI::PositiveNumber);

    // ood
    auto* ood_cmd = app.add_subcommand("ood", "train-on-source, test-on-target AUROC matrix");
    TrainOptions ood_to;
    std::vector<std::string> names;
    ood_to.add(ood_cmd);
    ood_cmd->add_option("--data", data_files, "one HSDS file per dataset")->required();
    ood_cmd->add_option("--names", names, "dataset names (default: file stems)");
    ood_cmd->add_option("--out", out_path);
    ood_cmd->add_option("--csv", csv_path);
    ood_cmd->add_option("--seed", seed);
    ood_cmd->add_option("--jobs", jobs)->check(CLI::PositiveNumber);

    // truncate-sweep
    auto* trunc_cmd = app.add_subcommand("truncate-sweep", "AUROC on partial answers");
    std::vector<double> fractions = default_truncation_fractions();
    trunc_cmd->add_option("--probe", probe_path)->required();
    trunc_cmd->add_option("--data", data, "test HSDS file")->required();
    trunc_cmd->add_option("--fractions", fractions);
    trunc_cmd->add_option("--out", out_path);
    trunc_cmd->add_option("--csv", csv_path);

    // rac
    auto* rac_cmd = app.add_subcommand("rac", "accuracy and router threshold at given coverages");
    std::vector<double> coverages{1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
    rac_cmd->add_option("--probe", probe_path)->required();
    rac_cmd->add_option("--data", data)->required();
    rac_cmd->add_option("--coverage", coverages);
    rac_cmd->add_option("--out", out_path);
    rac_cmd->add_option("--csv", csv_path, "full RAC curve");

    // plot
    auto* plot_cmd = app.add_subcommand("plot", "render an SVG from a JSON result");
    std::string plot_kind, input;
    plot_cmd->add_option("kind", plot_kind, "roc | rac | layer-sweep | truncation")
        ->required()
        ->check(CLI::IsMember({"roc", "rac", "layer-sweep", "truncation"}));
    plot_cmd->add_option("--input", input, "output of eval, layer-sweep or truncate-sweep")->required();
    plot_cmd->add_option("--out", out_path, "SVG path")->required();

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "HTTP router: GET /health, POST /score");
    RoutePolicy policy;
    std::string mode_text;
    std::string host = "127.0.0.1";
    int port = 8080;
    serve_cmd->add_option("--probe", probe_path)->required();
    serve_cmd->add_option("--tau", policy.tau)->check(CLI::Range(0.0, 1.0));
    serve_cmd->add_option("--fallback", policy.fallback_name);
    serve_cmd->add_option("--answer-fraction", policy.answer_fraction)->check(CLI::Range(0.0, 1.0));
    serve_cmd->add_option("--host", host);
    serve_cmd->add_option("--port", port, "0 picks a free port")->check(CLI::Range(0, 65535));

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "latency/accuracy of default, post-hoc and parallel routing");
    LatencyModel lm;
    std::string trace_path;
    sim_cmd->add_option("--trace", trace_path, "CSV with header p,label,answer_tokens");
    sim_cmd->add_option("--probe", probe_path, "score --data instead of reading a trace");
    sim_cmd->add_option("--data", data);
    sim_cmd->add_option("--tau", policy.tau)->check(CLI::Range(0.0, 1.0));
    sim_cmd->add_option("--default-token-time", lm.default_token_time)->check(CLI::PositiveNumber);
    sim_cmd->add_option("--fallback-token-time", lm.fallback_token_time)->check(CLI::PositiveNumber);
    sim_cmd->add_option("--probe-time", lm.probe_time)->check(CLI::PositiveNumber);
    sim_cmd->add_option("--fallback-accuracy", lm.fallback_accuracy)->check(CLI::Range(0.0, 1.0));
    sim_cmd->add_option("--out", out_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    }

    const CLI::App* sub = app.get_subcommands().front();
    err << "config: " << config_echo(*sub).dump() << "\n";

    try {
        if (sub == synth) {
            so.seed = seed;
            so.region = synth_region == "answer_tail" ? SignalRegion::answer_tail : SignalRegion::all_tokens;
            const auto records = synth_dataset(so);
            DatasetHeader h;
            h.model_name = synth_model;
            h.layer_index = synth_layer;
            h.hidden_dim = static_cast<std::uint32_t>(so.dim);
            write_dataset(records, h, synth_out);
            const auto v = validate(records);
            out << json{{"path", synth_out}, {"records", v.total}, {"positives", v.positives}}.dump() << "\n";
        } else if (sub == validate_cmd) {
            const auto ds = read_dataset(data);
            const auto v = validate(ds.records);
            const json r = {{"total", v.total},
                            {"positives", v.positives},
                            {"negatives", v.negatives},
                            {"accuracy", v.accuracy},
                            {"hidden_dim", ds.header.hidden_dim},
                            {"model_name", ds.header.model_name},
                            {"layer_index", ds.header.layer_index},
                            {"non_finite_ids", v.non_finite_ids},
                            {"empty_question_ids", v.empty_question_ids},
                            {"row_count_ids", v.row_count_ids},
                            {"bad_label_ids", v.bad_label_ids},
                            {"duplicate_ids", v.duplicate_ids}};
            emit(r, out_path, out);
            if (v.violation_count() > 0) {
                err << "error: " << v.violation_count() << " record violations\n";
                return exit_format;
            }
        } else if (sub == split_cmd) {
            ss.seed = seed;
            const auto ds = read_dataset(data);
            const auto parts = split(ds.records, ss);
            const std::filesystem::path dir(out_dir);
            std::filesystem::create_directories(dir);
            const auto stem = std::filesystem::path(data).stem().string();
            json r = json::object();
            for (const auto& [name, recs] : {std::pair{"train", &parts.train}, std::pair{"val", &parts.val},
                                             std::pair{"test", &parts.test}}) {
                const auto path = dir / (stem + "." + name + ".hsds");
                write_dataset(*recs, ds.header, path);
                r[name] = {{"path", path.string()}, {"records", recs->size()}};
            }
            out << r.dump(2) << "\n";
        } else if (sub == train_cmd) {
            const auto ds = read_dataset(data);
            const auto parts = split(ds.records, to.split_spec(seed));
            auto spec = to.spec();
            spec.model_name = ds.header.model_name;
            spec.layer_index = ds.header.layer_index;
            const auto result = train(spec, parts.train, parts.val, to.config(seed));
            save_checkpoint(result.params, probe_path);
            json r = {{"probe", probe_path},
                      {"probe_version", probe_fingerprint(result.params)},
                      {"history", to_json(result.history)}};
            if (!parts.test.empty()) {
                const auto rep = evaluate_probe(result.params, parts.test);
                r["test"] = {{"count", rep.count}, {"auroc", rep.auroc}, {"aurac", rep.aurac}, {"accuracy", rep.accuracy}};
            }
            emit(r, out_path, out);
        } else if (sub == eval_cmd) {
            const auto params = load_checkpoint(probe_path);
            const auto ds = read_dataset(data);
            const auto rep = evaluate_probe(params, ds.records);
            if (!csv_dir.empty()) {
                write_text(std::filesystem::path(csv_dir) / "roc.csv", roc_csv(rep.roc));
                write_text(std::filesystem::path(csv_dir) / "rac.csv", rac_csv(rep.rac));
            }
            if (!out_path.empty()) {
                write_text(out_path, to_json(rep).dump(2) + "\n");
            }
            out << json{{"count", rep.count}, {"positives", rep.positives}, {"auroc", rep.auroc},
                        {"aurac", rep.aurac}, {"accuracy", rep.accuracy}}
                       .dump(2)
                << "\n";
        } else if (sub == sweep_cmd) {
            std::vector<std::filesystem::path> paths(data_files.begin(), data_files.end());
            const auto rows =
                layer_sweep(std::span<const std::filesystem::path>(paths), sweep_to.spec(), sweep_to.config(seed),
                            sweep_to.split_spec(seed), jobs);
            if (!csv_path.empty()) {
                write_text(csv_path, layer_sweep_csv(rows));
            }
            emit(json{{"layers", to_json(rows)}}, out_path, out);
        } else if (sub == ood_cmd) {
            require(names.empty() || names.size() == data_files.size(), ErrorKind::invalid_argument,
                    "--names needs one name per --data file");
            std::vector<NamedDataset> sets;
            for (std::size_t i = 0; i < data_files.size(); ++i) {
                NamedDataset d;
                d.name = names.empty() ? std::filesystem::path(data_files[i]).stem().string() : names[i];
                d.records = read_dataset(data_files[i]).records;
                sets.push_back(std::move(d));
            }
            const auto m = ood_matrix(sets, ood_to.spec(), ood_to.config(seed), ood_to.split_spec(seed), jobs);
            if (!csv_path.empty()) {
                write_text(csv_path, ood_csv(m));
            }
            json rows = json::array();
            for (std::size_t t = 0; t < m.targets.size(); ++t) {
                json row = json::array();
                for (std::size_t s = 0; s < m.sources.size(); ++s) {
                    row.push_back(m.auroc(t, s));
                }
                rows.push_back(row);
            }
            emit(json{{"targets", m.targets}, {"sources", m.sources}, {"auroc", rows}}, out_path, out);
        } else if (sub == trunc_cmd) {
            const auto params = load_checkpoint(probe_path);
            const auto ds = read_dataset(data);
            const auto pts = truncation_sweep(params, ds.records, fractions);
            if (!csv_path.empty()) {
                write_text(csv_path, truncation_csv(pts));
            }
            emit(json{{"points", to_json(pts)}}, out_path, out);
        } else if (sub == rac_cmd) {
            const auto params = load_checkpoint(probe_path);
            const auto ds = read_dataset(data);
            const auto scored = score_records(params, ds.records);
            json pts = json::array();
            for (double c : coverages) {
                pts.push_back({{"coverage", c},
                               {"accuracy", accuracy_at_coverage(scored, c)},
                               {"tau", threshold_for_coverage(scored, c)}});
            }
            if (!csv_path.empty()) {
                write_text(csv_path, rac_csv(rac_curve(scored)));
            }
            emit(json{{"aurac", aurac(scored)}, {"accuracy", plain_accuracy(scored)}, {"points", pts}}, out_path, out);
        } else if (sub == plot_cmd) {
            const auto j = read_json(input);
            std::string svg;
            try {
                if (plot_kind == "roc" || plot_kind == "rac") {
                    if (plot_kind == "roc") {
                        std::vector<RocPoint> curve;
                        for (const auto& p : j.at("roc")) {
                            curve.push_back({p.at("fpr").get<double>(), p.at("tpr").get<double>(),
                                             from_nullable(p.at("threshold"))});
                        }
                        svg = roc_svg(curve, j.at("auroc").get<double>());
                    } else {
                        std::vector<RACPoint> curve;
                        for (const auto& p : j.at("rac")) {
                            curve.push_back({p.at("coverage").get<double>(), p.at("accuracy").get<double>(),
                                             p.at("threshold").get<double>(), p.at("retained").get<std::size_t>()});
                        }
                        svg = rac_svg(curve, j.at("aurac").get<double>());
                    }
                } else if (plot_kind == "layer-sweep") {
                    std::vector<LayerSweepRow> rows;
                    for (const auto& r : j.at("layers")) {
                        rows.push_back({r.at("layer").get<std::int64_t>(), r.at("auroc").get<double>(),
                                        r.at("aurac").get<double>(), r.at("accuracy").get<double>(),
                                        r.at("test_count").get<std::size_t>(), r.at("best_epoch").get<std::size_t>()});
                    }
                    svg = layer_sweep_svg(rows);
                } else {
                    std::vector<TruncationPoint> pts;
                    for (const auto& p : j.at("points")) {
                        TruncationPoint tp;
                        tp.fraction = p.at("fraction").get<double>();
                        tp.report.auroc = p.at("auroc").get<double>();
                        tp.report.aurac = p.at("aurac").get<double>();
                        tp.report.accuracy = p.at("accuracy").get<double>();
                        pts.push_back(tp);
                    }
                    svg = truncation_svg(pts);
                }
            } catch (const json::exception& e) {
                fail(ErrorKind::corrupt, input + ": not a " + plot_kind + " result: " + e.what());
            }
            write_text(out_path, svg);
            out << json{{"svg", out_path}}.dump() << "\n";
        } else if (sub == serve_cmd) {
            auto params = load_checkpoint(probe_path);
            policy.mode = params.mode;
            const RouterService service(std::move(params), policy);
            RouterServer server(service);
            const int bound = server.bind(host, port);
            g_server.store(&server);
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            err << "listening on " << host << ":" << bound << " probe_version " << service.probe_version() << "\n";
            server.listen();
            g_server.store(nullptr);
        } else if (sub == sim_cmd) {
            SimTrace trace;
            if (!trace_path.empty()) {
                trace.scored = read_trace_csv(trace_path, trace.answer_tokens);
            } else {
                require(!probe_path.empty() && !data.empty(), ErrorKind::invalid_argument,
                        "simulate needs --trace, or --probe with --data");
                const auto params = load_checkpoint(probe_path);
                const auto ds = read_dataset(data);
                trace.scored = score_records(params, ds.records);
                for (const auto& r : ds.records) {
                    trace.answer_tokens.push_back(r.n_answer);
                }
            }
            const auto rep = simulate(trace, policy, lm);
            emit(json{{"items", rep.items.size()},
                      {"always_default", to_json(rep.always_default)},
                      {"post_hoc", to_json(rep.post_hoc)},
                      {"parallel", to_json(rep.parallel)},
                      {"max_added_direct", rep.max_added_direct},
                      {"max_added_fallback", rep.max_added_fallback},
                      {"bound_holds", rep.bound_holds}},
                 out_path, out);
        }
    } catch (const Error& e) {
        err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error (io): " << e.what() << "\n";
        return exit_io;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_other;
    }
    return exit_ok;
}

}  // namespace hsprobe
