#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "opmatch/io.hpp"

using namespace opmatch;

TEST_CASE("tensor file round-trip is bit exact") {
    Rng rng(7);
    Tensor t = Tensor::randn({2, 3, 4}, rng);
    io::save_tensor("io_rt.opmt", t);
    Tensor r = io::load_tensor("io_rt.opmt");
    REQUIRE(r.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i)
        CHECK(r.data()[(size_t)i] == t.data()[(size_t)i]);
    std::remove("io_rt.opmt");
}

TEST_CASE("tensor file layout: magic, rank, extents, little-endian doubles") {
    Tensor t = Tensor::from_data({1, 2}, {1.0, -2.5});
    io::save_tensor("io_layout.opmt", t);
    std::ifstream f("io_layout.opmt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() == 4 + 4 + 8 + 16);
    CHECK(bytes.substr(0, 4) == "OPMT");
    CHECK((unsigned char)bytes[4] == 2);  // rank, LE
    CHECK((unsigned char)bytes[8] == 1);  // extent 0
    CHECK((unsigned char)bytes[12] == 2);  // extent 1
    double v0, v1;
    std::memcpy(&v0, bytes.data() + 16, 8);
    std::memcpy(&v1, bytes.data() + 24, 8);
    CHECK(v0 == 1.0);
    CHECK(v1 == -2.5);
    std::remove("io_layout.opmt");
}

TEST_CASE("corrupt magic and truncated payloads are rejected") {
    {
        std::ofstream f("io_bad.opmt", std::ios::binary);
        f << "NOPE";
    }
    CHECK_THROWS_AS(io::load_tensor("io_bad.opmt"), io::IoError);
    io::save_tensor("io_trunc.opmt", Tensor::from_data({4}, {1, 2, 3, 4}));
    {
        std::ifstream in("io_trunc.opmt", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        std::ofstream out("io_trunc.opmt", std::ios::binary);
        out.write(bytes.data(), (std::streamsize)bytes.size() - 8);
    }
    CHECK_THROWS_AS(io::load_tensor("io_trunc.opmt"), io::IoError);
    CHECK_THROWS_AS(io::load_tensor("io_missing.opmt"), io::IoError);
    std::remove("io_bad.opmt");
    std::remove("io_trunc.opmt");
}

TEST_CASE("named archive round-trip") {
    Rng rng(9);
    std::map<std::string, Tensor> m;
    m["alpha"] = Tensor::randn({3}, rng);
    m["beta.w"] = Tensor::randn({2, 2}, rng);
    io::save_archive("io_arch.opma", m);
    auto r = io::load_archive("io_arch.opma");
    REQUIRE(r.size() == 2);
    for (const auto& [name, t] : m) {
        REQUIRE(r.count(name) == 1);
        CHECK(r.at(name).shape() == t.shape());
        for (int64_t i = 0; i < t.numel(); ++i)
            CHECK(r.at(name).data()[(size_t)i] == t.data()[(size_t)i]);
    }
    std::remove("io_arch.opma");
}
