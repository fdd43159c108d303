#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include <sigmatch/matcher.hpp>

#include "oracles.hpp"

using namespace sigmatch;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() /
                     ("sigmatch_db_test_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir / name;
}

Signature sig(std::initializer_list<float> v) { return Signature(std::vector<float>(v)); }

Signature random_sig(std::mt19937_64& rng, std::size_t d, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    std::vector<float> v(d);
    for (auto& x : v) x = static_cast<float>(g(rng));
    return Signature(std::move(v));
}

} // namespace

TEST_CASE("enroll: stored unit-normalized, duplicates rejected") {
    TemplateDB db(3);
    db.enroll("plate-1", sig({3, 0, 4}));
    REQUIRE(db.size() == 1);
    CHECK(db.contains("plate-1"));
    double norm = 0;
    for (float v : db.stored(0)) norm += static_cast<double>(v) * v;
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);

    CHECK_THROWS_AS(db.enroll("plate-1", sig({1, 1, 1})), DuplicateError);
    CHECK_THROWS_AS(db.enroll("plate-2", sig({1, 1})), DimensionError);
    CHECK_THROWS_AS(db.enroll("plate-2", sig({0, 0, 0})), ValueError);
}

TEST_CASE("cosine distance fixtures") {
    const Signature a = sig({1, 2, 2});
    CHECK_THAT(cosine_distance(a, a), Catch::Matchers::WithinAbs(0.0, 1e-12));

    const Signature x = sig({1, 0});
    const Signature y = sig({0, 5});
    CHECK(cosine_distance(x, y) == 1.0);

    const Signature nx = sig({-1, -2, -2});
    CHECK_THAT(cosine_distance(a, nx), Catch::Matchers::WithinAbs(2.0, 1e-12));

    CHECK_THROWS_AS(cosine_distance(a, sig({1, 0})), DimensionError);
    CHECK_THROWS_AS(cosine_distance(a, sig({0, 0, 0})), ValueError);
}

TEST_CASE("match: exact enrolled query at threshold zero") {
    TemplateDB db(4);
    db.enroll("alpha", sig({1, 2, 3, 4}));
    db.enroll("beta", sig({-4, 3, -2, 1}));

    const MatchResult r = db.match(sig({-4, 3, -2, 1}), 0.0);
    CHECK(r.accepted);
    CHECK(r.identity == "beta");
    CHECK(r.distance == 0.0);
}

TEST_CASE("match: empty database rejects with infinite best distance") {
    TemplateDB db(4);
    const MatchResult r = db.match(sig({1, 0, 0, 0}), 2.0);
    CHECK_FALSE(r.accepted);
    CHECK(std::isinf(r.distance));
    CHECK(r.identity.empty());
}

TEST_CASE("match: zero query is an error") {
    TemplateDB db(2);
    db.enroll("a", sig({1, 0}));
    CHECK_THROWS_AS(db.match(sig({0, 0}), 1.0), ValueError);
}

TEST_CASE("match: equals the linear-scan oracle on random instances") {
    std::mt19937_64 rng(71);
    std::uniform_int_distribution<std::size_t> n_dist(1, 60);
    std::uniform_real_distribution<double> t_dist(0.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 8;
        const std::size_t n = n_dist(rng);
        TemplateDB db(d);
        std::vector<oracle::ScanEntry> entries;
        for (std::size_t i = 0; i < n; ++i) {
            const Signature s = random_sig(rng, d);
            const std::string id = "t" + std::to_string(i);
            db.enroll(id, s);
            entries.push_back(
                {id, std::vector<double>(s.values.begin(), s.values.end())});
        }
        const Signature q = random_sig(rng, d);
        const double threshold = t_dist(rng);
        const MatchResult got = db.match(q, threshold);
        const oracle::ScanDecision want = oracle::linear_scan(
            entries, std::vector<double>(q.values.begin(), q.values.end()), threshold);
        REQUIRE(got.accepted == want.accepted);
        if (got.accepted) REQUIRE(got.identity == want.identity);
        REQUIRE(std::abs(got.distance - want.best) < 1e-6);
    }
}

TEST_CASE("match: decision invariant to positive query rescaling") {
    std::mt19937_64 rng(83);
    TemplateDB db(6);
    for (int i = 0; i < 20; ++i) db.enroll("t" + std::to_string(i), random_sig(rng, 6));
    for (int trial = 0; trial < 50; ++trial) {
        const Signature q = random_sig(rng, 6);
        const double threshold = 0.1 + 0.02 * trial;
        const MatchResult base = db.match(q, threshold);
        for (float scale : {0.25f, 4.0f, 1024.0f}) { // exact in binary float
            Signature scaled = q;
            for (float& v : scaled.values) v *= scale;
            const MatchResult r = db.match(scaled, threshold);
            CHECK(r.accepted == base.accepted);
            CHECK(r.identity == base.identity);
            CHECK(r.distance == base.distance);
        }
    }
}

TEST_CASE("match: raising the threshold never flips accepted to rejected") {
    std::mt19937_64 rng(97);
    TemplateDB db(5);
    for (int i = 0; i < 15; ++i) db.enroll("t" + std::to_string(i), random_sig(rng, 5));
    for (int trial = 0; trial < 40; ++trial) {
        const Signature q = random_sig(rng, 5);
        bool was_accepted = false;
        for (double t = 0.0; t <= 2.0; t += 0.05) {
            const MatchResult r = db.match(q, t);
            if (was_accepted) CHECK(r.accepted);
            was_accepted = was_accepted || r.accepted;
        }
        // threshold 2 accepts anything when the db is nonempty
        CHECK(db.match(q, 2.0).accepted);
    }
}

TEST_CASE("match: ties go to the earliest enrollment") {
    TemplateDB db(2);
    db.enroll("first", sig({1, 0}));
    db.enroll("second", sig({2, 0})); // same direction, same unit vector
    const MatchResult r = db.match(sig({3, 0}), 1.0);
    CHECK(r.accepted);
    CHECK(r.identity == "first");
}

TEST_CASE("match_batch: singleton batch equals single match, permutations commute") {
    std::mt19937_64 rng(111);
    TemplateDB db(6);
    for (int i = 0; i < 10; ++i) db.enroll("t" + std::to_string(i), random_sig(rng, 6));

    std::vector<Signature> queries;
    for (int i = 0; i < 7; ++i) queries.push_back(random_sig(rng, 6));

    const double threshold = 0.8;
    const auto batch = db.match_batch(queries, threshold);
    REQUIRE(batch.size() == queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const MatchResult single = db.match(queries[i], threshold);
        CHECK(batch[i].accepted == single.accepted);
        CHECK(batch[i].identity == single.identity);
        CHECK(batch[i].distance == single.distance);
    }

    std::vector<Signature> reversed(queries.rbegin(), queries.rend());
    const auto rev = db.match_batch(reversed, threshold);
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const MatchResult& a = batch[i];
        const MatchResult& b = rev[queries.size() - 1 - i];
        CHECK(a.accepted == b.accepted);
        CHECK(a.identity == b.identity);
        CHECK(a.distance == b.distance);
    }

    MatchTiming timing;
    db.match_batch(queries, threshold, &timing);
    CHECK(timing.queries == queries.size());
    CHECK(timing.total_seconds >= 0.0);
}

TEST_CASE("match_batch: results identical across thread counts") {
    std::mt19937_64 rng(211);
    TemplateDB db(8);
    for (int i = 0; i < 300; ++i) db.enroll("t" + std::to_string(i), random_sig(rng, 8));
    std::vector<Signature> queries;
    for (int i = 0; i < 32; ++i) queries.push_back(random_sig(rng, 8));

    const auto serial = db.match_batch(queries, 0.7);
    threads::set_count(4);
    const auto parallel = db.match_batch(queries, 0.7);
    threads::set_count(1);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
        CHECK(serial[i].accepted == parallel[i].accepted);
        CHECK(serial[i].identity == parallel[i].identity);
        CHECK(serial[i].distance == parallel[i].distance);
    }
}

TEST_CASE("match_batch: per-query time grows roughly linearly in template count") {
    std::mt19937_64 rng(131);
    const std::size_t d = 64;
    std::vector<Signature> queries;
    for (int i = 0; i < 64; ++i) queries.push_back(random_sig(rng, d));

    auto measure = [&](std::size_t n) {
        TemplateDB db(d);
        for (std::size_t i = 0; i < n; ++i)
            db.enroll("t" + std::to_string(i), random_sig(rng, d));
        double best = std::numeric_limits<double>::infinity();
        for (int rep = 0; rep < 5; ++rep) {
            MatchTiming timing;
            db.match_batch(queries, 1.0, &timing);
            best = std::min(best, timing.per_query_seconds);
        }
        return best;
    };

    const double t1 = measure(1000);
    const double t2 = measure(2000);
    const double t4 = measure(4000);
    CHECK(t2 > t1 * 0.8);
    CHECK(t4 > t2 * 0.8);
    const double ratio = t4 / t1;
    INFO("t1=" << t1 << " t2=" << t2 << " t4=" << t4 << " ratio=" << ratio);
    CHECK(ratio > 2.0);
    CHECK(ratio < 8.0);
}

TEST_CASE("save/load: bit-exact round trip preserving order") {
    std::mt19937_64 rng(149);
    TemplateDB db(5);
    db.enroll("first", sig({1, 0, 0, 0, 0}));
    db.enroll("dup-direction", sig({2, 0, 0, 0, 0}));
    for (int i = 0; i < 9; ++i) db.enroll("t" + std::to_string(i), random_sig(rng, 5));

    const auto p = temp_file("db.tmdb");
    save_db(db, p);
    const TemplateDB back = load_db(p);
    REQUIRE(back.size() == db.size());
    CHECK(back.dimension() == db.dimension());
    for (std::size_t i = 0; i < db.size(); ++i) {
        CHECK(back.identity(i) == db.identity(i));
        const auto a = db.stored(i);
        const auto b = back.stored(i);
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }

    // tie-break order survives the round trip
    const MatchResult r = back.match(sig({5, 0, 0, 0, 0}), 1.0);
    CHECK(r.identity == "first");

    // second save emits identical bytes
    const auto q = temp_file("db2.tmdb");
    save_db(back, q);
    std::ifstream f1(p, std::ios::binary), f2(q, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)),
                         std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)),
                         std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("load_db: corrupt files") {
    SECTION("bad magic") {
        const auto p = temp_file("bad.tmdb");
        std::ofstream out(p, std::ios::binary);
        out << "NOPE123456789";
        out.close();
        CHECK_THROWS_AS(load_db(p), FormatError);
    }
    SECTION("truncated") {
        TemplateDB db(4);
        db.enroll("a", sig({1, 2, 3, 4}));
        db.enroll("b", sig({4, 3, 2, 1}));
        const auto p = temp_file("t.tmdb");
        save_db(db, p);
        std::ifstream in(p, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() - 5);
        const auto q = temp_file("t2.tmdb");
        std::ofstream out(q, std::ios::binary);
        out << bytes;
        out.close();
        CHECK_THROWS_AS(load_db(q), FormatError);
    }
}
