#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "fg/error.hpp"
#include "fg/io.hpp"
#include "fg/parallel.hpp"
#include "fg/rng.hpp"
#include "fg/tensor.hpp"
#include "oracles.hpp"

using namespace fg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "fg_test_core" / name;
    fs::create_directories(p.parent_path());
    return p;
}

Tensor random_tensor(Rng& rng) {
    Shape shape(1 + rng.below(4));
    for (auto& e : shape) e = 1 + rng.below(5);
    Tensor t(shape);
    for (auto& v : t.data()) v = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
    return t;
}

}  // namespace

TEST_CASE("tensor shape and indexing") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    t.at({1, 2}) = 5.0;
    CHECK(t[5] == 5.0);
    CHECK(t.slice(1)[2] == 5.0);
    CHECK_THROWS_AS(Tensor({2, 0}), ConfigError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ConfigError);
    CHECK_THROWS_AS(t.at({2, 0}), ConfigError);
}

TEST_CASE("cosine similarity") {
    const std::vector<double> v{0.3, -1.2, 4.0};
    CHECK(cosine_similarity(v, v) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
    CHECK(cosine_similarity(std::vector<double>{1, 1}, std::vector<double>{1, 0}) ==
          doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK_THROWS_WITH_AS(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}), "degenerate vector",
                         NumericError);

    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        std::vector<double> a(6), b(6);
        for (auto& x : a) x = rng.normal();
        for (auto& x : b) x = rng.normal();
        const double lambda = rng.uniform(0.01, 100.0);
        std::vector<double> la = a;
        for (auto& x : la) x *= lambda;
        CHECK(std::abs(cosine_similarity(a, b) - cosine_similarity(b, a)) <= 1e-12);
        CHECK(std::abs(cosine_similarity(a, b) - cosine_similarity(la, b)) <= 1e-12);
    }
}

TEST_CASE("minmax normalization per frame") {
    const Tensor a = minmax_normalize(Tensor({1, 1, 3}, {2, 4, 6}));
    CHECK(a[0] == 0.0);
    CHECK(a[1] == 0.5);
    CHECK(a[2] == 1.0);
    const Tensor c = minmax_normalize(Tensor({1, 1, 3}, {5, 5, 5}));
    for (double v : c.data()) CHECK(v == 0.0);
    const Tensor two = minmax_normalize(Tensor({2, 1, 2}, {0, 1, 10, 30}));
    CHECK(two[0] == 0.0);
    CHECK(two[1] == 1.0);
    CHECK(two[2] == 0.0);
    CHECK(two[3] == 1.0);

    Rng rng(3);
    Tensor r({3, 4, 5});
    for (auto& v : r.data()) v = rng.normal();
    const Tensor once = minmax_normalize(r);
    CHECK(bit_equal(once, minmax_normalize(once)));
}

TEST_CASE("serialization round trip and format") {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        const Tensor t = random_tensor(rng);
        CHECK(bit_equal(decode_tensor(encode_tensor(t)), t));
    }

    const auto path = scratch("two_by_two.fgt");
    const Tensor t({2, 2}, {1, 2, 3, 4});
    serialize_tensor(t, path);
    // 4 magic + 4 rank + 2 x 4 extents + 4 x 8 payload
    CHECK(fs::file_size(path) == 48);
    CHECK(bit_equal(deserialize_tensor(path), t));
    const std::string bytes = read_file(path);
    CHECK(bytes.substr(0, 4) == "FGT1");
    CHECK(static_cast<unsigned char>(bytes[4]) == 2);
    CHECK(static_cast<unsigned char>(bytes[8]) == 2);
    CHECK(static_cast<unsigned char>(bytes[12]) == 2);
    // 1.0 = 0x3FF0000000000000, little-endian
    CHECK(static_cast<unsigned char>(bytes[23]) == 0x3F);
    CHECK(static_cast<unsigned char>(bytes[22]) == 0xF0);
}

TEST_CASE("deserialization rejects malformed files") {
    std::string good = encode_tensor(Tensor({2}, {1.0, 2.0}));
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_tensor(bad_magic), IoError);
    CHECK_THROWS_AS(decode_tensor(good.substr(0, good.size() - 1)), IoError);
    std::string empty_shape = "FGT1";
    empty_shape += std::string(4, '\0');
    CHECK_THROWS_AS(decode_tensor(empty_shape), IoError);
    std::string nan = good;
    const double q = std::nan("");
    std::memcpy(nan.data() + 12, &q, sizeof q);
    CHECK_THROWS_AS(decode_tensor(nan), NumericError);
    CHECK_THROWS_AS(deserialize_tensor(scratch("does_not_exist.fgt")), IoError);
}

TEST_CASE("map csv export") {
    const auto path = scratch("map.csv");
    export_map_csv(Tensor({1, 1, 2}, {0.1, 1.0 / 3.0}), path);
    const std::string text = read_file(path);
    CHECK(text.rfind("frame,y,x,value\n", 0) == 0);
    CHECK(text.find("0,0,1,0.33333333333333331") != std::string::npos);
    CHECK(std::stod(format_real(1.0 / 3.0)) == 1.0 / 3.0);
}

TEST_CASE("token sequences") {
    TokenSequence text(Modality::text, 3);
    CHECK_THROWS_AS(text.validate(), ConfigError);
    TokenSequence anchors(Modality::anchor, 3);
    CHECK_NOTHROW(anchors.validate());
    text.push_back(std::vector<double>{1, 2, 3});
    CHECK(text.size() == 1);
    CHECK_THROWS_AS(text.push_back(std::vector<double>{1, 2}), ConfigError);
    CHECK(text.to_tensor().shape() == Shape{1, 3});
    CHECK(modality_from_string(to_string(Modality::image)) == Modality::image);
}

TEST_CASE("latent video layout") {
    LatentVideo v(2, 3, 4, 5);
    v.cell(1, 2, 3)[4] = 7.0;
    CHECK(v.tensor().at({1, 2, 3, 4}) == 7.0);
    CHECK(v.cells() == 24);
    CHECK_THROWS_AS(LatentVideo(Tensor({2, 3})), ConfigError);
}

TEST_CASE("splitmix stream matches the golden vector") {
    Rng rng(42);
    const auto& golden = oracle::splitmix_golden_42();
    REQUIRE(golden.size() == 64);
    for (auto g : golden) CHECK(rng.next_u64() == g);
}

TEST_CASE("rng helpers are deterministic and in range") {
    Rng a(9), b(9);
    for (int i = 0; i < 1000; ++i) {
        const double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(a.below(7) == b.below(7));
    }
    double sum = 0.0, sq = 0.0;
    Rng n(1);
    for (int i = 0; i < 20000; ++i) {
        const double x = n.normal();
        sum += x;
        sq += x * x;
    }
    CHECK(std::abs(sum / 20000) < 0.05);
    CHECK(std::abs(sq / 20000 - 1.0) < 0.05);
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
}

TEST_CASE("parallel_for visits every index once and propagates errors") {
    std::vector<std::atomic<int>> hits(100);
    parallel_for(100, [&](std::size_t i) { hits[i]++; }, 3);
    for (auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(10, [](std::size_t i) { if (i == 5) throw NumericError("boom"); }, 2), NumericError);
}

TEST_CASE("json io and digests") {
    const auto path = scratch("x.json");
    write_json(path, {{"a", 1}});
    CHECK(read_json(path)["a"] == 1);
    write_file(path, "{not json");
    CHECK_THROWS_AS(read_json(path), ConfigError);
    CHECK(content_digest("abc") == content_digest("abc"));
    CHECK(content_digest("abc") != content_digest("abd"));
}
