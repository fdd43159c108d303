// sigmatch command-line front end: data synthesis and splitting, training,
// enrollment, matching, benchmarking and report plotting.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <sigmatch/sigmatch.hpp>

namespace {

using namespace sigmatch;

int resolve_threads(int flag_value, bool flag_given) {
    if (flag_given) return flag_value;
    if (const char* env = std::getenv("SIGMATCH_THREADS")) {
        try {
            return std::max(1, std::stoi(env));
        } catch (...) {
            throw InputError("SIGMATCH_THREADS is not a number");
        }
    }
    return 1;
}

Dataset load_any(const std::string& path) {
    return load_dataset(path, dataset_format_for(path));
}

DatasetFormat format_from_flag(const std::string& fmt, const std::string& path) {
    if (fmt == "csv") return DatasetFormat::csv;
    if (fmt == "binary") return DatasetFormat::binary;
    if (fmt == "auto") return dataset_format_for(path);
    throw InputError("unknown format '" + fmt + "'");
}

/// Embeds a dataset through a model in eval mode; without a model the rows
/// are taken as signatures directly.
std::vector<Signature> to_signatures(const Dataset& ds,
                                     const std::optional<EmbeddingNetwork>& model) {
    std::vector<Signature> sigs(ds.size());
    if (!model) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            auto f = ds.features(i);
            sigs[i] = Signature(std::vector<float>(f.begin(), f.end()));
        }
        return sigs;
    }
    if (ds.dimension() != model->config().input_dim)
        throw DimensionError("dataset dimension does not match the model input");
    const std::size_t chunk = 512;
    std::vector<std::size_t> rows;
    for (std::size_t base = 0; base < ds.size(); base += chunk) {
        const std::size_t hi = std::min(ds.size(), base + chunk);
        rows.resize(hi - base);
        for (std::size_t i = base; i < hi; ++i) rows[i - base] = i;
        const Matrix out = model->forward(ds.gather(rows), ForwardMode::eval);
        for (std::size_t i = base; i < hi; ++i) sigs[i] = Signature(out.row(i - base));
    }
    return sigs;
}

struct SynthArgs {
    std::size_t classes = 0, per_class = 0, dim = 0;
    double intra = 0.05, inter = 1.0;
    std::uint64_t seed = 0;
    std::string out, format = "auto";
};

struct SplitArgs {
    std::string data, out_train, out_val, out_bench;
    std::vector<double> fractions{0.6, 0.2, 0.2};
    std::uint64_t seed = 0;
};

struct TrainArgs {
    std::string data, val, out, config, history, init_model;
    std::uint64_t seed = 0;
    int threads = 1;
    // network
    std::size_t hidden_dim = 2048, signature_dim = 512;
    std::string activation = "sigmoid", normalization = "batch_norm";
    double norm_scale = 0.0, bn_epsilon = 1e-5, bn_momentum = 0.9;
    // training overrides (applied over the config file when given)
    double alpha = 1.75, learning_rate = 0.01, momentum = 0.9, enroll_fraction = 0.6,
           lr_decay = 0.1;
    std::size_t batch_size = 1000, epochs = 20, eval_every = 1, per_class = 2,
                negatives_per_anchor = 5, positives_per_anchor = 1, plateau_evals = 3;
    std::string loss = "triplet";
};

struct EnrollArgs {
    std::string data, db, model;
    bool per_example = false;
    int threads = 1;
};

struct MatchArgs {
    std::string db, query, model, out;
    double threshold = 0.0;
    int threads = 1;
};

struct BenchArgs {
    std::string model, data, out, selection = "first";
    double enroll_fraction = 0.6;
    std::uint64_t seed = 0;
    std::size_t thresholds = 200;
    int threads = 1;
};

struct PlotArgs {
    std::string report, out_accuracy, out_fpr;
};

int run_synth(const SynthArgs& a) {
    const Dataset ds =
        generate_synthetic(a.classes, a.per_class, a.dim, a.intra, a.inter, a.seed);
    save_dataset(ds, a.out, format_from_flag(a.format, a.out));
    std::cout << "wrote " << ds.size() << " examples (" << ds.class_count() << " classes, dim "
              << ds.dimension() << ") to " << a.out << "\n";
    return 0;
}

int run_split(const SplitArgs& a) {
    if (a.fractions.size() != 3) throw InputError("--fractions needs exactly 3 values");
    const Dataset ds = load_any(a.data);
    const auto parts =
        split_dataset(ds, {a.fractions[0], a.fractions[1], a.fractions[2]}, a.seed);
    const std::string outs[3] = {a.out_train, a.out_val, a.out_bench};
    const char* names[3] = {"train", "val", "bench"};
    for (int i = 0; i < 3; ++i) {
        save_dataset(parts[i], outs[i], dataset_format_for(outs[i]));
        std::cout << names[i] << ": " << parts[i].size() << " examples, "
                  << parts[i].class_count() << " classes -> " << outs[i] << "\n";
    }
    return 0;
}

int run_train(const TrainArgs& a, const CLI::App* cmd) {
    threads::set_count(resolve_threads(a.threads, cmd->count("--threads") > 0));
    const Dataset train_ds = load_any(a.data);
    std::optional<Dataset> val_ds;
    if (!a.val.empty()) val_ds = load_any(a.val);

    TrainConfig cfg;
    if (!a.config.empty()) cfg = load_train_config(a.config);
    auto given = [&](const std::string& flag) { return cmd->count(flag) > 0; };
    const bool no_file = a.config.empty();
    if (no_file || given("--alpha")) cfg.margin.alpha = a.alpha;
    if (no_file || given("--batch-size")) cfg.batch_size = a.batch_size;
    if (no_file || given("--loss")) cfg.loss_kind = loss_kind_from_string(a.loss);
    if (no_file || given("--learning-rate")) cfg.learning_rate = a.learning_rate;
    if (no_file || given("--momentum")) cfg.momentum = a.momentum;
    if (no_file || given("--epochs")) cfg.epochs = a.epochs;
    if (no_file || given("--seed")) cfg.seed = a.seed;
    if (no_file || given("--eval-every")) cfg.eval_every = a.eval_every;
    if (no_file || given("--per-class")) cfg.per_class = a.per_class;
    if (no_file || given("--negatives-per-anchor"))
        cfg.negatives_per_anchor = a.negatives_per_anchor;
    if (no_file || given("--positives-per-anchor"))
        cfg.positives_per_anchor = a.positives_per_anchor;
    if (no_file || given("--enroll-fraction")) cfg.enroll_fraction = a.enroll_fraction;
    if (no_file || given("--lr-decay")) cfg.lr_decay = a.lr_decay;
    if (no_file || given("--plateau-evals")) cfg.plateau_evals = a.plateau_evals;

    EmbeddingNetwork net = [&] {
        if (!a.init_model.empty()) return load_model(a.init_model);
        NetworkConfig nc;
        nc.input_dim = train_ds.dimension();
        nc.hidden_dim = a.hidden_dim;
        nc.signature_dim = a.signature_dim;
        nc.hidden_activation = activation_from_string(a.activation);
        nc.normalization = normalization_from_string(a.normalization);
        nc.norm_scale = a.norm_scale;
        nc.batch_norm_epsilon = a.bn_epsilon;
        nc.batch_norm_momentum = a.bn_momentum;
        return init_kaiming(nc, derive_seed(cfg.seed, 0x1217));
    }();

    const TrainHistory history =
        train(net, train_ds, val_ds ? &*val_ds : nullptr, cfg);
    save_model(net, a.out);
    if (!a.history.empty())
        write_file_atomic(a.history, [&](std::ostream& out) { write_history_csv(history, out); });

    const EpochStats& last = history.epochs.back();
    std::cout << "trained " << history.epochs.size() << " epochs; final loss " << last.loss
              << ", active " << last.active_triplets;
    if (last.val_accuracy) std::cout << ", val accuracy " << *last.val_accuracy;
    std::cout << "; model -> " << a.out << "\n";
    return 0;
}

int run_enroll(const EnrollArgs& a, const CLI::App* cmd) {
    threads::set_count(resolve_threads(a.threads, cmd->count("--threads") > 0));
    const Dataset ds = load_any(a.data);
    std::optional<EmbeddingNetwork> model;
    if (!a.model.empty()) model = load_model(a.model);
    const std::vector<Signature> sigs = to_signatures(ds, model);
    if (sigs.empty()) throw InputError("nothing to enroll");

    TemplateDB db(sigs.front().dim());
    if (a.per_example) {
        for (std::size_t i = 0; i < ds.size(); ++i) db.enroll(ds.example_id(i), sigs[i]);
    } else {
        for (std::uint32_t cid : ds.classes()) {
            const auto& members = ds.class_examples(cid);
            const std::size_t pick = *std::min_element(members.begin(), members.end());
            db.enroll(std::to_string(cid), sigs[pick]);
        }
    }
    save_db(db, a.db);
    std::cout << "enrolled " << db.size() << " templates (dim " << db.dimension() << ") -> "
              << a.db << "\n";
    return 0;
}

int run_match(const MatchArgs& a, const CLI::App* cmd) {
    threads::set_count(resolve_threads(a.threads, cmd->count("--threads") > 0));
    const TemplateDB db = load_db(a.db);
    const Dataset queries = load_any(a.query);
    std::optional<EmbeddingNetwork> model;
    if (!a.model.empty()) model = load_model(a.model);
    const std::vector<Signature> sigs = to_signatures(queries, model);

    MatchTiming timing;
    const std::vector<MatchResult> results = db.match_batch(sigs, a.threshold, &timing);

    std::ostringstream text;
    text << "query_id,decision,identity,distance\n";
    for (std::size_t i = 0; i < results.size(); ++i) {
        const MatchResult& r = results[i];
        text << queries.example_id(i) << ',' << (r.accepted ? "accepted" : "rejected") << ','
             << r.identity << ',' << r.distance << '\n';
    }
    if (a.out.empty()) {
        std::cout << text.str();
    } else {
        write_file_atomic(a.out, [&](std::ostream& out) { out << text.str(); });
        std::cout << "wrote " << results.size() << " results to " << a.out << "\n";
    }
    std::cerr << "matched " << timing.queries << " queries against " << db.size()
              << " templates in " << timing.total_seconds << " s\n";
    return 0;
}

int run_benchmark(const BenchArgs& a, const CLI::App* cmd) {
    threads::set_count(resolve_threads(a.threads, cmd->count("--threads") > 0));
    const EmbeddingNetwork model = load_model(a.model);
    const Dataset bench = load_any(a.data);

    BenchmarkOptions opts;
    opts.enroll_fraction = a.enroll_fraction;
    opts.seed = a.seed;
    opts.thresholds = default_threshold_grid(a.thresholds);
    if (a.selection == "first")
        opts.selection = TemplateSelection::first_example;
    else if (a.selection == "random")
        opts.selection = TemplateSelection::random_example;
    else
        throw InputError("unknown template selection '" + a.selection + "'");

    const BenchmarkReport report = benchmark(model, bench, opts);
    write_file_atomic(a.out, [&](std::ostream& out) { write_report_csv(report, out); });
    std::cout << "templates " << report.template_count << ", queries " << report.query_count
              << ", matching " << report.total_seconds << " s ("
              << report.per_query_seconds * 1e6 << " us/query); report -> " << a.out << "\n";
    return 0;
}

int run_roc_plot(const PlotArgs& a) {
    if (a.out_accuracy.empty() && a.out_fpr.empty())
        throw InputError("give --out-accuracy and/or --out-fpr");
    std::ifstream in(a.report);
    if (!in) throw Error("cannot open report: " + a.report);
    const BenchmarkReport report = read_report_csv(in);

    PlotSeries acc{"accuracy", {}}, fp{"fpr", {}};
    for (const RocPoint& p : report.curve.points) {
        if (p.yield && p.accuracy) acc.points.emplace_back(*p.yield, *p.accuracy);
        if (p.yield && p.fpr) fp.points.emplace_back(*p.yield, *p.fpr);
    }
    if (!a.out_accuracy.empty()) {
        write_file_atomic(a.out_accuracy, [&](std::ostream& out) {
            write_line_chart_svg(out, "Yield vs Accuracy", "yield", "accuracy", {acc});
        });
        std::cout << "wrote " << a.out_accuracy << "\n";
    }
    if (!a.out_fpr.empty()) {
        write_file_atomic(a.out_fpr, [&](std::ostream& out) {
            write_line_chart_svg(out, "Yield vs FPR", "yield", "false positive rate", {fp});
        });
        std::cout << "wrote " << a.out_fpr << "\n";
    }
    return 0;
}

void tensor_stats(const char* name, const std::vector<float>& t) {
    double mn = t.empty() ? 0 : t[0], mx = mn, sum = 0, sq = 0;
    for (float v : t) {
        mn = std::min(mn, static_cast<double>(v));
        mx = std::max(mx, static_cast<double>(v));
        sum += v;
        sq += static_cast<double>(v) * v;
    }
    const double mean = t.empty() ? 0 : sum / t.size();
    const double var = t.empty() ? 0 : sq / t.size() - mean * mean;
    std::cout << "  " << name << ": n=" << t.size() << " min=" << mn << " max=" << mx
              << " mean=" << mean << " std=" << std::sqrt(std::max(var, 0.0)) << "\n";
}

int run_inspect(const std::string& path) {
    const EmbeddingNetwork net = load_model(path);
    const NetworkConfig& c = net.config();
    std::cout << "model " << path << "\n"
              << "  input_dim=" << c.input_dim << " hidden_dim=" << c.hidden_dim
              << " signature_dim=" << c.signature_dim << "\n"
              << "  activation=" << to_string(c.hidden_activation)
              << " normalization=" << to_string(c.normalization)
              << " norm_scale=" << c.norm_scale << "\n"
              << "  bn_epsilon=" << c.batch_norm_epsilon
              << " bn_momentum=" << c.batch_norm_momentum << "\n";
    tensor_stats("W1", net.w1());
    tensor_stats("b1", net.b1());
    tensor_stats("W2", net.w2());
    tensor_stats("b2", net.b2());
    tensor_stats("bn_gain", net.bn_gain());
    tensor_stats("bn_bias", net.bn_bias());
    tensor_stats("bn_running_mean", net.bn_running_mean());
    tensor_stats("bn_running_var", net.bn_running_var());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"signature matching toolkit"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic clustered dataset");
    synth_cmd->add_option("--classes", synth.classes, "number of classes")->required();
    synth_cmd->add_option("--per-class", synth.per_class, "examples per class")->required();
    synth_cmd->add_option("--dim", synth.dim, "feature dimension")->required();
    synth_cmd->add_option("--intra", synth.intra, "within-class spread")->capture_default_str();
    synth_cmd->add_option("--inter", synth.inter, "between-class spread")->capture_default_str();
    synth_cmd->add_option("--seed", synth.seed, "random seed")->capture_default_str();
    synth_cmd->add_option("--out", synth.out, "output dataset path")->required();
    synth_cmd->add_option("--format", synth.format, "csv|binary|auto")->capture_default_str();

    SplitArgs split;
    auto* split_cmd = app.add_subcommand("split", "class-disjoint dataset split");
    split_cmd->add_option("--data", split.data, "input dataset")->required();
    split_cmd->add_option("--fractions", split.fractions,
                          "train,val,bench fractions (sum to 1)")
        ->delimiter(',');
    split_cmd->add_option("--seed", split.seed, "random seed")->capture_default_str();
    split_cmd->add_option("--out-train", split.out_train, "train output")->required();
    split_cmd->add_option("--out-val", split.out_val, "val output")->required();
    split_cmd->add_option("--out-bench", split.out_bench, "bench output")->required();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train an embedding model");
    train_cmd->add_option("--data", train_args.data, "training dataset")->required();
    train_cmd->add_option("--val", train_args.val, "validation dataset");
    train_cmd->add_option("--out", train_args.out, "output model path")->required();
    train_cmd->add_option("--config", train_args.config, "key=value training config file");
    train_cmd->add_option("--history", train_args.history, "per-epoch history CSV");
    train_cmd->add_option("--init-model", train_args.init_model,
                          "start from an existing model instead of fresh init");
    train_cmd->add_option("--hidden-dim", train_args.hidden_dim, "hidden layer width")->capture_default_str();
    train_cmd->add_option("--signature-dim", train_args.signature_dim, "signature width")->capture_default_str();
    train_cmd->add_option("--activation", train_args.activation,
                          "sigmoid|relu|tanh|identity")->capture_default_str();
    train_cmd->add_option("--normalization", train_args.normalization,
                          "batch_norm|l2_scaled")->capture_default_str();
    train_cmd->add_option("--norm-scale", train_args.norm_scale,
                          "signature norm scale (0 = sqrt(signature dim))")->capture_default_str();
    train_cmd->add_option("--bn-epsilon", train_args.bn_epsilon, "batch-norm epsilon")->capture_default_str();
    train_cmd->add_option("--bn-momentum", train_args.bn_momentum,
                          "batch-norm running-stat momentum")->capture_default_str();
    train_cmd->add_option("--alpha", train_args.alpha, "triplet margin")->capture_default_str();
    train_cmd->add_option("--batch-size", train_args.batch_size, "minibatch size")->capture_default_str();
    train_cmd->add_option("--loss", train_args.loss, "triplet|quadruplet|autoencoder")->capture_default_str();
    train_cmd->add_option("--learning-rate", train_args.learning_rate, "SGD learning rate")->capture_default_str();
    train_cmd->add_option("--momentum", train_args.momentum, "SGD momentum")->capture_default_str();
    train_cmd->add_option("--epochs", train_args.epochs, "max epochs")->capture_default_str();
    train_cmd->add_option("--seed", train_args.seed, "random seed")->capture_default_str();
    train_cmd->add_option("--eval-every", train_args.eval_every,
                          "validate every N epochs (0 = never)")->capture_default_str();
    train_cmd->add_option("--per-class", train_args.per_class, "examples per class per batch")->capture_default_str();
    train_cmd->add_option("--negatives-per-anchor", train_args.negatives_per_anchor,
                          "mined negatives per anchor")->capture_default_str();
    train_cmd->add_option("--positives-per-anchor", train_args.positives_per_anchor,
                          "positives per anchor")->capture_default_str();
    train_cmd->add_option("--enroll-fraction", train_args.enroll_fraction,
                          "validation enrollment fraction")->capture_default_str();
    train_cmd->add_option("--lr-decay", train_args.lr_decay, "plateau decay factor")->capture_default_str();
    train_cmd->add_option("--plateau-evals", train_args.plateau_evals,
                          "evals without improvement before decay")->capture_default_str();
    train_cmd->add_option("--threads", train_args.threads, "worker threads")->capture_default_str();

    EnrollArgs enroll;
    auto* enroll_cmd = app.add_subcommand("enroll", "build a template database");
    enroll_cmd->add_option("--data", enroll.data, "dataset to enroll")->required();
    enroll_cmd->add_option("--db", enroll.db, "output template database")->required();
    enroll_cmd->add_option("--model", enroll.model, "embed features through this model");
    enroll_cmd->add_flag("--per-example", enroll.per_example,
                         "enroll every example under its example_id "
                         "(default: first example per class under the class id)");
    enroll_cmd->add_option("--threads", enroll.threads, "worker threads")->capture_default_str();

    MatchArgs match;
    auto* match_cmd = app.add_subcommand("match", "match queries against a template database");
    match_cmd->add_option("--db", match.db, "template database")->required();
    match_cmd->add_option("--query", match.query, "query dataset")->required();
    match_cmd->add_option("--threshold", match.threshold, "rejection threshold")->required();
    match_cmd->add_option("--model", match.model, "embed features through this model");
    match_cmd->add_option("--out", match.out, "write results CSV here instead of stdout");
    match_cmd->add_option("--threads", match.threads, "worker threads")->capture_default_str();

    BenchArgs bench;
    auto* bench_cmd = app.add_subcommand("benchmark", "run the enrollment benchmark protocol");
    bench_cmd->add_option("--model", bench.model, "embedding model")->required();
    bench_cmd->add_option("--data", bench.data, "benchmark dataset")->required();
    bench_cmd->add_option("--enroll-fraction", bench.enroll_fraction,
                          "fraction of classes to enroll")->capture_default_str();
    bench_cmd->add_option("--seed", bench.seed, "random seed")->capture_default_str();
    bench_cmd->add_option("--out", bench.out, "report CSV path")->required();
    bench_cmd->add_option("--thresholds", bench.thresholds, "threshold grid size")->capture_default_str();
    bench_cmd->add_option("--template-selection", bench.selection, "first|random")->capture_default_str();
    bench_cmd->add_option("--threads", bench.threads, "worker threads")->capture_default_str();

    PlotArgs plot;
    auto* plot_cmd = app.add_subcommand("roc-plot", "render report curves as SVG");
    plot_cmd->add_option("--report", plot.report, "benchmark report CSV")->required();
    plot_cmd->add_option("--out-accuracy", plot.out_accuracy, "yield-vs-accuracy SVG path");
    plot_cmd->add_option("--out-fpr", plot.out_fpr, "yield-vs-fpr SVG path");

    std::string inspect_path;
    auto* inspect_cmd = app.add_subcommand("inspect-model", "print model configuration");
    inspect_cmd->add_option("--model", inspect_path, "model path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (synth_cmd->parsed()) return run_synth(synth);
        if (split_cmd->parsed()) return run_split(split);
        if (train_cmd->parsed()) return run_train(train_args, train_cmd);
        if (enroll_cmd->parsed()) return run_enroll(enroll, enroll_cmd);
        if (match_cmd->parsed()) return run_match(match, match_cmd);
        if (bench_cmd->parsed()) return run_benchmark(bench, bench_cmd);
        if (plot_cmd->parsed()) return run_roc_plot(plot);
        if (inspect_cmd->parsed()) return run_inspect(inspect_path);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const SplitError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const MiningError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DuplicateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
