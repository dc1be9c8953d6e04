#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "amalgam/zoo.hpp"

using namespace amalgam;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("amalgam_zoo_" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::vector<char> bytes_of(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

ErrorKind load_error(const fs::path& p) {
    try {
        load_net(p);
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("load unexpectedly succeeded");
    return ErrorKind::io;
}

BlockNet sample_net(std::uint64_t seed) {
    BlockNetSpec s;
    s.heads = {{"is_red", 2}, {"shape", 3}};
    return BlockNet::build(s, seed);
}

}  // namespace

TEST_CASE("net round trip is bitwise and deterministic") {
    TempDir dir;
    BlockNet net = sample_net(3);
    save_net(net, dir.path / "a.amlg");
    save_net(net, dir.path / "b.amlg");
    CHECK(bytes_of(dir.path / "a.amlg") == bytes_of(dir.path / "b.amlg"));
    BlockNet back = load_net(dir.path / "a.amlg");
    CHECK(back.spec() == net.spec());
    CHECK(back.bitwise_equal(net));
}

TEST_CASE("header layout") {
    TempDir dir;
    save_net(sample_net(1), dir.path / "n.amlg");
    const auto b = bytes_of(dir.path / "n.amlg");
    REQUIRE(b.size() > 17);
    CHECK(std::string(b.begin(), b.begin() + 4) == "AMLG");
    CHECK(b[4] == 1);
    CHECK(b[5] == 0);
    CHECK(b[6] == 0);
    CHECK(b[7] == 0);
    std::vector<std::uint8_t> body(b.begin(), b.end() - 8);
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b[b.size() - 8 + i])) << (8 * i);
    CHECK(stored == fnv1a64(body));
}

TEST_CASE("corrupted containers are rejected") {
    TempDir dir;
    const auto path = dir.path / "n.amlg";
    save_net(sample_net(2), path);
    const auto good = bytes_of(path);

    auto truncated = good;
    truncated.pop_back();
    write_bytes(path, truncated);
    CHECK(load_error(path) == ErrorKind::corruption);

    auto flipped = good;
    flipped[flipped.size() / 2] ^= 0x10;
    write_bytes(path, flipped);
    CHECK(load_error(path) == ErrorKind::corruption);

    auto magic = good;
    magic[0] = 'X';
    write_bytes(path, magic);
    CHECK(load_error(path) == ErrorKind::format);

    // A future version with a valid checksum must still be refused.
    Container c = decode_container(std::vector<std::uint8_t>(good.begin(), good.end()));
    auto enc = encode_container(c);
    enc[4] = 2;
    const std::uint64_t sum = fnv1a64(std::span(enc).first(enc.size() - 8));
    for (int i = 0; i < 8; ++i) enc[enc.size() - 8 + i] = static_cast<std::uint8_t>(sum >> (8 * i));
    write_bytes(path, std::vector<char>(enc.begin(), enc.end()));
    CHECK(load_error(path) == ErrorKind::version);

    CHECK(load_error(dir.path / "missing.amlg") == ErrorKind::io);
}

TEST_CASE("dataset round trip") {
    TempDir dir;
    Dataset d = generate(SceneDistribution{}, 20, 4);
    save_dataset(d, dir.path / "d.amlg");
    Dataset back = load_dataset(dir.path / "d.amlg");
    CHECK(back.tasks == d.tasks);
    CHECK(back.ids == d.ids);
    CHECK(back.labels == d.labels);
    CHECK(std::equal(back.images.data().begin(), back.images.data().end(), d.images.data().begin()));
    REQUIRE(back.scenes.size() == d.scenes.size());
    CHECK(back.scenes[3].noise_seed == d.scenes[3].noise_seed);
    CHECK(back.scenes[3].radius == d.scenes[3].radius);
    CHECK_THROWS_AS(load_net(dir.path / "d.amlg"), Error);
}

TEST_CASE("registry operations") {
    TempDir dir;
    ZooRegistry zoo(dir.path);
    auto e = zoo.add_net("s1", sample_net(1), NetRole::source);
    CHECK(zoo.lookup("s1") == e);
    CHECK(e.tasks == TaskSet{"is_red", "shape"});
    CHECK(zoo.load("s1").bitwise_equal(sample_net(1)));
    try {
        zoo.add_net("s1", sample_net(2), NetRole::source);
        FAIL("expected conflict");
    } catch (const Error& err) {
        CHECK(err.kind() == ErrorKind::conflict);
    }
    try {
        zoo.lookup("nope");
        FAIL("expected not found");
    } catch (const Error& err) {
        CHECK(err.kind() == ErrorKind::not_found);
    }
    CHECK_NOTHROW(zoo.verify());
    fs::remove(dir.path / "s1.amlg");
    CHECK_THROWS_AS(zoo.verify(), Error);
}

TEST_CASE("list_by_task agrees with cluster_sources") {
    TempDir dir;
    ZooRegistry zoo(dir.path);
    const std::vector<SourceEntry> pool{{"s1", {"A", "B", "C"}}, {"s2", {"A"}}, {"s3", {"C", "D"}}, {"s4", {"B", "D"}}};
    for (const auto& s : pool) zoo.register_net({s.id, s.id + ".amlg", NetRole::source, s.tasks});
    const auto groups = cluster_sources(pool, {"A", "D"});
    CHECK(zoo.list_by_task("A") == groups.at("A"));
    CHECK(zoo.list_by_task("D") == groups.at("D"));
    CHECK(zoo.entries().size() == 4);
}

TEST_CASE("concurrent registers all land") {
    TempDir dir;
    ZooRegistry zoo(dir.path);
    std::vector<std::thread> workers;
    for (int t = 0; t < 8; ++t) {
        workers.emplace_back([&, t] {
            ZooRegistry mine(dir.path);
            for (int i = 0; i < 10; ++i) {
                const std::string id = "w" + std::to_string(t) + "_" + std::to_string(i);
                mine.register_net({id, id + ".amlg", NetRole::component, {"A"}});
            }
        });
    }
    for (auto& w : workers) w.join();
    CHECK(zoo.entries().size() == 80);
    CHECK(zoo.list_by_task("A").size() == 80);
}
