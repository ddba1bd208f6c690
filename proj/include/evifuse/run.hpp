#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evifuse/data.hpp"
#include "evifuse/errors.hpp"
#include "evifuse/metrics.hpp"
#include "evifuse/tagger.hpp"

#include <json.hpp>

namespace evifuse {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct DataConfig {
    bool synthetic = true;
    SynthConfig synth = synth_standard_config();
    std::size_t dev_count = 400;
    std::size_t test_count = 400;
    // file mode
    std::string train_path, dev_path, test_path;
    std::vector<std::string> feature_paths;  // one per provided split, in order
    BioPolicy bio_policy = BioPolicy::repair;
};

struct RunConfig {
    DataConfig data;
    TrainConfig train;
    std::string out_dir = "out";
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "1" || v == "on" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "off" || v == "false" || v == "no") return false;
    throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number '" + v + "' for " + key);
    }
}

inline long long parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer '" + v + "' for " + key);
    }
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace detail

inline std::vector<Modality> parse_channels(const std::string& v) {
    std::vector<Modality> out;
    for (const std::string& name : detail::split_list(v)) {
        const auto m = modality_from_name(name);
        if (!m) throw ConfigError("config: unknown channel '" + name + "'");
        out.push_back(*m);
    }
    if (out.empty()) throw ConfigError("config: channels list is empty");
    return out;
}

/// Applies one `key=value` pair onto the run config.
inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    TrainConfig& t = cfg.train;
    SynthConfig& s = cfg.data.synth;
    if (key == "out") cfg.out_dir = value;
    else if (key == "seed") t.seed = static_cast<std::uint64_t>(detail::parse_int(value, key));
    else if (key == "epochs") t.epochs = static_cast<int>(detail::parse_int(value, key));
    else if (key == "batch") t.batch_size = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "lr") t.learning_rate = detail::parse_double(value, key);
    else if (key == "hidden") t.hidden = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "embed_dim") t.embed_dim = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "epsilon") t.epsilon = detail::parse_double(value, key);
    else if (key == "grad_clip") t.grad_clip = detail::parse_double(value, key);
    else if (key == "vocab") t.vocab_size = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "channels") t.channels = parse_channels(value);
    else if (key == "lambda") t.loss.lambda = detail::parse_double(value, key);
    else if (key == "classification_weight") t.loss.classification_weight = detail::parse_double(value, key);
    else if (key == "evidential") t.use_evidential_loss = detail::parse_bool(value, key);
    else if (key == "fusion.strategy") {
        const auto st = strategy_from_name(value);
        if (!st) throw ConfigError("config: unknown fusion.strategy '" + value + "'");
        t.fusion.strategy = *st;
    } else if (key == "fusion.gating") {
        const auto g = gating_from_name(value);
        if (!g) throw ConfigError("config: unknown fusion.gating '" + value + "'");
        t.fusion.gating = *g;
    } else if (key == "fusion.invert_gating") t.fusion.invert_gating = detail::parse_bool(value, key);
    else if (key == "data.source") {
        if (value == "synth") cfg.data.synthetic = true;
        else if (value == "files") cfg.data.synthetic = false;
        else throw ConfigError("config: data.source must be 'synth' or 'files'");
    }
    else if (key == "synth.train") s.sequence_count = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "synth.dev") cfg.data.dev_count = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "synth.test") cfg.data.test_count = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "synth.min_len") s.min_length = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "synth.max_len") s.max_length = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "synth.entity_density") s.entity_density = detail::parse_double(value, key);
    else if (key == "synth.sigma_text") s.sigma_text = detail::parse_double(value, key);
    else if (key == "synth.sigma_image") s.sigma_image = detail::parse_double(value, key);
    else if (key == "synth.conflict_rate") s.conflict_rate = detail::parse_double(value, key);
    else if (key == "synth.feature_width") s.feature_width = static_cast<std::size_t>(detail::parse_int(value, key));
    else if (key == "synth.seed") s.seed = static_cast<std::uint64_t>(detail::parse_int(value, key));
    else if (key == "files.train") cfg.data.train_path = value;
    else if (key == "files.dev") cfg.data.dev_path = value;
    else if (key == "files.test") cfg.data.test_path = value;
    else if (key == "files.features") cfg.data.feature_paths = detail::split_list(value);
    else if (key == "files.bio") {
        if (value == "repair") cfg.data.bio_policy = BioPolicy::repair;
        else if (value == "reject") cfg.data.bio_policy = BioPolicy::reject;
        else throw ConfigError("config: files.bio must be 'repair' or 'reject'");
    }
    else throw ConfigError("config: unknown key '" + key + "'");
}

/// `key=value` per line; blank lines and '#' comments ignored.
inline void load_config_file(const std::string& path, RunConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
            line.pop_back();
        std::size_t begin = line.find_first_not_of(" \t");
        if (begin == std::string::npos) continue;
        const std::size_t eq = line.find('=', begin);
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
        apply_config_key(cfg, line.substr(begin, eq - begin), line.substr(eq + 1));
    }
}

/// Deterministic echo of the resolved configuration; its FNV digest names the
/// run in checkpoints.
inline std::string render_config(const RunConfig& cfg) {
    std::ostringstream out;
    const TrainConfig& t = cfg.train;
    const SynthConfig& s = cfg.data.synth;
    out << "out=" << cfg.out_dir << '\n';
    out << "seed=" << t.seed << '\n';
    out << "epochs=" << t.epochs << '\n';
    out << "batch=" << t.batch_size << '\n';
    out << "lr=" << detail::format_double(t.learning_rate) << '\n';
    out << "hidden=" << t.hidden << '\n';
    out << "embed_dim=" << t.embed_dim << '\n';
    out << "epsilon=" << detail::format_double(t.epsilon) << '\n';
    out << "grad_clip=" << detail::format_double(t.grad_clip) << '\n';
    out << "vocab=" << t.vocab_size << '\n';
    out << "channels=";
    for (std::size_t i = 0; i < t.channels.size(); ++i)
        out << (i ? "," : "") << to_string(t.channels[i]);
    out << '\n';
    out << "lambda=" << detail::format_double(t.loss.lambda) << '\n';
    out << "classification_weight=" << detail::format_double(t.loss.classification_weight) << '\n';
    out << "evidential=" << (t.use_evidential_loss ? "on" : "off") << '\n';
    out << "fusion.strategy=" << to_string(t.fusion.strategy) << '\n';
    out << "fusion.gating=" << to_string(t.fusion.gating) << '\n';
    out << "fusion.invert_gating=" << (t.fusion.invert_gating ? 1 : 0) << '\n';
    out << "data.source=" << (cfg.data.synthetic ? "synth" : "files") << '\n';
    if (cfg.data.synthetic) {
        out << "synth.train=" << s.sequence_count << '\n';
        out << "synth.dev=" << cfg.data.dev_count << '\n';
        out << "synth.test=" << cfg.data.test_count << '\n';
        out << "synth.min_len=" << s.min_length << '\n';
        out << "synth.max_len=" << s.max_length << '\n';
        out << "synth.entity_density=" << detail::format_double(s.entity_density) << '\n';
        out << "synth.sigma_text=" << detail::format_double(s.sigma_text) << '\n';
        out << "synth.sigma_image=" << detail::format_double(s.sigma_image) << '\n';
        out << "synth.conflict_rate=" << detail::format_double(s.conflict_rate) << '\n';
        out << "synth.feature_width=" << s.feature_width << '\n';
        out << "synth.seed=" << s.seed << '\n';
    } else {
        out << "files.train=" << cfg.data.train_path << '\n';
        out << "files.dev=" << cfg.data.dev_path << '\n';
        out << "files.test=" << cfg.data.test_path << '\n';
        out << "files.features=";
        for (std::size_t i = 0; i < cfg.data.feature_paths.size(); ++i)
            out << (i ? "," : "") << cfg.data.feature_paths[i];
        out << '\n';
        out << "files.bio=" << (cfg.data.bio_policy == BioPolicy::repair ? "repair" : "reject") << '\n';
    }
    return out.str();
}

inline std::string config_digest(const RunConfig& cfg) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(render_config(cfg))));
    return buf;
}

// ---------------------------------------------------------------------------
// Data resolution
// ---------------------------------------------------------------------------

struct LoadedData {
    Dataset train, dev, test;
};

inline LoadedData load_data(const DataConfig& cfg, std::size_t vocab_size,
                            BioPolicy policy_override_unused = BioPolicy::repair) {
    (void)policy_override_unused;
    LoadedData d;
    if (cfg.synthetic) {
        SynthSplits splits = generate_splits(cfg.synth, cfg.dev_count, cfg.test_count);
        d.train = std::move(splits.train);
        d.dev = std::move(splits.dev);
        d.test = std::move(splits.test);
        return d;
    }
    std::vector<Dataset*> splits;
    if (!cfg.train_path.empty()) {
        d.train = read_conll(cfg.train_path, vocab_size, cfg.bio_policy);
        splits.push_back(&d.train);
    }
    if (!cfg.dev_path.empty()) {
        d.dev = read_conll(cfg.dev_path, vocab_size, cfg.bio_policy);
        splits.push_back(&d.dev);
    }
    if (!cfg.test_path.empty()) {
        d.test = read_conll(cfg.test_path, vocab_size, cfg.bio_policy);
        splits.push_back(&d.test);
    }
    if (splits.empty()) throw ConfigError("file data source selected but no paths given");
    if (!cfg.feature_paths.empty()) {
        if (cfg.feature_paths.size() != splits.size())
            throw ConfigError("need one --features file per provided split (got " +
                              std::to_string(cfg.feature_paths.size()) + " for " +
                              std::to_string(splits.size()) + " splits)");
        for (std::size_t i = 0; i < splits.size(); ++i)
            attach_features(*splits[i], read_features(cfg.feature_paths[i]), Modality::pretrained);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

struct RunResult {
    std::vector<MetricsRecord> epochs;
    EvalResult test;
    bool has_test = false;
    std::string metrics_path, checkpoint_path, config_path;
};

inline void write_metrics_jsonl(const std::string& path, std::span<const MetricsRecord> records) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path);
    for (const MetricsRecord& r : records) out << to_json(r).dump() << '\n';
    if (!out) throw DataError("write failed for " + path);
}

inline RunResult run_train(const RunConfig& cfg, bool quiet = false) {
    require_valid(cfg.train);
    if (cfg.data.synthetic) require_valid(cfg.data.synth);
    if (cfg.out_dir.empty()) throw ConfigError("output directory must not be empty");

    LoadedData data = load_data(cfg.data, cfg.train.vocab_size);
    if (data.train.empty()) throw ConfigError("no training data resolved");

    TrainResult tr = train(data.train, data.dev, cfg.train);

    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    RunResult out;
    out.epochs = tr.epochs;
    out.metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    out.checkpoint_path = (fs::path(cfg.out_dir) / "model.ckpt").string();
    out.config_path = (fs::path(cfg.out_dir) / "run.cfg").string();

    write_metrics_jsonl(out.metrics_path, tr.epochs);
    save_checkpoint(out.checkpoint_path, tr.model, cfg.train.seed, config_digest(cfg));
    {
        std::ofstream c(out.config_path);
        if (!c) throw DataError("cannot open " + out.config_path);
        c << render_config(cfg);
    }
    if (!data.test.empty()) {
        out.test = evaluate(tr.model, data.test);
        out.has_test = true;
        MetricsRecord rec;
        rec.epoch = cfg.train.epochs;
        rec.spans = out.test.spans;
        rec.mean_var_mu = out.test.mean_var_mu;
        rec.mean_e_sigma2 = out.test.mean_e_sigma2;
        rec.loss = tr.epochs.back().loss;
        std::ofstream t((fs::path(cfg.out_dir) / "test_metrics.json").string());
        t << to_json(rec).dump(2) << '\n';
    }
    if (!quiet) {
        if (!tr.epochs.empty()) {
            const MetricsRecord& last = tr.epochs.back();
            std::printf("train: %d epochs, final loss %.5f, dev F1 %.4f\n", cfg.train.epochs,
                        last.loss.grand_total, last.spans.overall_prf().f1);
        }
        if (out.has_test)
            std::printf("test: P %.4f R %.4f F1 %.4f\n", out.test.spans.overall_prf().precision,
                        out.test.spans.overall_prf().recall, out.test.spans.overall_prf().f1);
        std::printf("wrote %s, %s, %s\n", out.metrics_path.c_str(), out.checkpoint_path.c_str(),
                    out.config_path.c_str());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string label;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline std::string format_sweep_table(std::span<const SweepRow> rows) {
    std::ostringstream out;
    out << "lambda          P        R       F1\n";
    char buf[80];
    for (const SweepRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%-10s %8.4f %8.4f %8.4f\n", r.label.c_str(), r.precision,
                      r.recall, r.f1);
        out << buf;
    }
    return out.str();
}

/// One full train/eval per lambda (same seed), plus the evidential-off
/// baseline row. Rows carry overall test P/R/F1.
inline std::vector<SweepRow> run_sweep(const RunConfig& cfg, std::span<const double> lambdas,
                                       bool quiet = false) {
    if (lambdas.empty()) throw ConfigError("sweep: need at least one lambda");
    namespace fs = std::filesystem;
    std::vector<SweepRow> rows;

    const auto run_one = [&](RunConfig sub, const std::string& label) {
        sub.out_dir = (fs::path(cfg.out_dir) / label).string();
        const RunResult r = run_train(sub, true);
        if (!r.has_test) throw ConfigError("sweep: a test split is required");
        const Prf prf = r.test.spans.overall_prf();
        rows.push_back({label, prf.precision, prf.recall, prf.f1});
        if (!quiet) std::printf("sweep %-10s F1 %.4f\n", label.c_str(), prf.f1);
    };

    for (const double lambda : lambdas) {
        RunConfig sub = cfg;
        sub.train.loss.lambda = lambda;
        sub.train.use_evidential_loss = true;
        char label[32];
        std::snprintf(label, sizeof label, "lambda_%g", lambda);
        run_one(sub, label);
    }
    {
        RunConfig sub = cfg;
        sub.train.use_evidential_loss = false;
        run_one(sub, "baseline");
    }

    fs::create_directories(cfg.out_dir);
    const std::string table = format_sweep_table(rows);
    std::ofstream out((fs::path(cfg.out_dir) / "sweep.txt").string());
    out << table;
    if (!quiet) std::fputs(table.c_str(), stdout);
    return rows;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// final / first; 1.0 for constant or degenerate series.
inline double decrease_ratio(std::span<const double> series) {
    if (series.size() < 2 || series.front() == 0.0) return 1.0;
    return series.back() / series.front();
}

inline double least_squares_slope(std::span<const double> series) {
    const std::size_t n = series.size();
    if (n < 2) return 0.0;
    double mean_x = 0.0, mean_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_x += static_cast<double>(i);
        mean_y += series[i];
    }
    mean_x /= static_cast<double>(n);
    mean_y /= static_cast<double>(n);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = static_cast<double>(i) - mean_x;
        num += dx * (series[i] - mean_y);
        den += dx * dx;
    }
    return num / den;
}

struct ReportEntry {
    std::string label;
    std::vector<int> epochs;
    std::vector<double> uncertainty;  // selected formula
    double final_f1 = 0.0;
    double ratio = 1.0;
    double slope = 0.0;
};

inline ReportEntry read_metrics_series(const std::string& path, GatingFormula formula) {
    std::ifstream in(path);
    if (!in) throw DataError("report: cannot open " + path);
    ReportEntry e;
    e.label = std::filesystem::path(path).parent_path().filename().string();
    if (e.label.empty()) e.label = path;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            throw DataError("report: " + path + ":" + std::to_string(line_no) + ": " + ex.what());
        }
        if (!j.contains("schema") || j["schema"] != kMetricsSchema)
            throw DataError("report: " + path + ":" + std::to_string(line_no) +
                            ": missing or unknown schema");
        e.epochs.push_back(j["epoch"].get<int>());
        const char* field =
            formula == GatingFormula::beta_over_gamma_alpha ? "var_mu" : "e_sigma2";
        e.uncertainty.push_back(j["uncertainty"][field].get<double>());
        e.final_f1 = j["overall"]["f1"].get<double>();
    }
    if (e.uncertainty.empty()) throw DataError("report: " + path + " holds no records");
    e.ratio = decrease_ratio(e.uncertainty);
    e.slope = least_squares_slope(e.uncertainty);
    return e;
}

/// Uncertainty-vs-epoch series plus a cross-run comparison table.
inline std::string run_report(std::span<const std::string> metrics_paths, GatingFormula formula,
                              const std::string& out_dir = "") {
    if (metrics_paths.empty()) throw ConfigError("report: need at least one metrics file");
    std::ostringstream out;
    std::vector<ReportEntry> entries;
    for (const std::string& p : metrics_paths) entries.push_back(read_metrics_series(p, formula));

    for (const ReportEntry& e : entries) {
        out << "# uncertainty per epoch: " << e.label << " (" << to_string(formula) << ")\n";
        for (std::size_t i = 0; i < e.uncertainty.size(); ++i)
            out << e.epochs[i] << ' ' << detail::format_double(e.uncertainty[i]) << '\n';
        out << '\n';
    }
    out << "run                        final_F1  unc_ratio  unc_slope\n";
    char buf[120];
    for (const ReportEntry& e : entries) {
        std::snprintf(buf, sizeof buf, "%-24s %9.4f %10.4f %10.6f\n", e.label.c_str(), e.final_f1,
                      e.ratio, e.slope);
        out << buf;
    }
    const std::string text = out.str();
    if (!out_dir.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        std::ofstream f((fs::path(out_dir) / "report.txt").string());
        f << text;
    }
    return text;
}

}  // namespace evifuse
