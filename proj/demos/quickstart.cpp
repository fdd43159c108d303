// End-to-end walkthrough: synthesize clustered data, split it by class,
// train a small embedding with the triplet loss, then run the enrollment
// benchmark and print a few operating points.

#include <iostream>

#include <sigmatch/sigmatch.hpp>

int main() {
    using namespace sigmatch;

    const Dataset full = generate_synthetic(120, 4, 64, 0.05, 1.0, 7);
    const auto parts = split_dataset(full, {0.7, 0.1, 0.2}, 7);
    const Dataset& train_ds = parts[0];
    const Dataset& val_ds = parts[1];
    const Dataset& bench_ds = parts[2];

    // a crowded low-dimensional signature sphere, so the margin actually
    // bites and the mining/descent dynamics are visible
    NetworkConfig nc;
    nc.input_dim = 64;
    nc.hidden_dim = 48;
    nc.signature_dim = 8;
    nc.normalization = Normalization::l2_scaled;
    EmbeddingNetwork net = init_kaiming(nc, 1);

    TrainConfig tc;
    tc.batch_size = 64;
    tc.learning_rate = 0.003;
    tc.epochs = 15;
    tc.seed = 7;
    TrainHistory history = train(net, train_ds, &val_ds, tc);
    std::cout << "epochs run: " << history.epochs.size() << "\n";
    for (std::size_t e = 0; e < history.epochs.size(); ++e) {
        const EpochStats& s = history.epochs[e];
        std::cout << "  epoch " << (e + 1) << ": loss " << s.loss << ", active "
                  << s.active_triplets;
        if (s.val_accuracy) std::cout << ", val acc " << *s.val_accuracy;
        std::cout << "\n";
    }

    BenchmarkOptions opts;
    opts.enroll_fraction = 0.6;
    opts.seed = 7;
    const BenchmarkReport report = benchmark(net, bench_ds, opts);
    std::cout << "benchmark: " << report.template_count << " templates, "
              << report.query_count << " queries, " << report.per_query_seconds * 1e6
              << " us/query\n";
    for (const RocPoint& p : report.curve.points) {
        if (p.yield && *p.yield >= 0.999 && p.accuracy) {
            std::cout << "first yield-1.0 point: threshold " << p.threshold << ", accuracy "
                      << *p.accuracy;
            if (p.fpr) std::cout << ", fpr " << *p.fpr;
            std::cout << "\n";
            break;
        }
    }
    return 0;
}
