#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "amalgam/cli.hpp"
#include "amalgam/engine.hpp"
#include "amalgam/zoo.hpp"

using namespace amalgam;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        std::random_device rd;
        path = fs::temp_directory_path() / ("amalgam_cli_" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

struct Outcome {
    int code;
    std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "amalgam");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small enough to run a full dual-stage pipeline in well under a second.
const std::vector<std::string> kTiny{"--set", "teacher_samples=24", "--set", "unlabeled=32", "--set", "test=32",
                                     "--set", "teacher_epochs=1",   "--epochs", "1"};

}  // namespace

TEST_CASE("usage errors exit 1") {
    CHECK(invoke({}).code == cli::usage_error);
    const auto r = invoke({"no-such-command"});
    CHECK(r.code == cli::usage_error);
    CHECK(r.err.rfind("ERROR 1 usage: ", 0) == 0);
    CHECK(invoke({"--help"}).code == cli::ok);
}

TEST_CASE("validation and io errors") {
    TempDir tmp;
    const auto out = tmp.path.string();
    CHECK(invoke({"dual-stage", "--out", out, "--set", "nope=1"}).code == cli::validation_error);
    CHECK(invoke({"dual-stage", "--out", out, "--lr", "-1"}).code == cli::validation_error);
    CHECK(invoke({"dual-stage", "--out", out, "--set", "epochs=ten"}).code == cli::validation_error);
    const auto missing = invoke({"eval", "--out", out, "--net", (tmp.path / "absent.amlg").string(), "--data", out});
    CHECK(missing.code == cli::io_error);
    CHECK(missing.err.rfind("ERROR 3 io: ", 0) == 0);

    std::ofstream(tmp.path / "bad.conf") << "lr = 0.1\nthis line has no equals sign\n";
    CHECK(invoke({"resources", "--out", out, "--config", (tmp.path / "bad.conf").string()}).code ==
          cli::validation_error);
}

TEST_CASE("config file, --set and flags layer in order") {
    TempDir tmp;
    std::ofstream(tmp.path / "run.conf") << "# comment\nlr = 0.5\nmomentum = 0.8  # trailing\nbatch_size = 8\n";
    const auto r = invoke({"resources", "--out", tmp.path.string(), "--config", (tmp.path / "run.conf").string(), "--set",
                           "lr=0.25", "--batch", "4", "--run-id", "layered"});
    REQUIRE(r.code == cli::ok);
    const auto resolved = slurp(tmp.path / "layered" / "config.resolved");
    CHECK(resolved.find("lr = 0.25\n") != std::string::npos);
    CHECK(resolved.find("momentum = 0.8\n") != std::string::npos);
    CHECK(resolved.find("batch_size = 4\n") != std::string::npos);
}

TEST_CASE("eval reports 1.0 for a perfect predictor") {
    TempDir tmp;
    BlockNetSpec spec;
    spec.heads = {{"is_red", 2}, {"shape", 3}};
    const BlockNet net = BlockNet::build(spec, 9);
    Dataset data = generate(SceneDistribution{}, 40, 4);
    const auto feats = net.forward(data.images);
    for (const auto& [task, logits] : feats.logits) {
        const std::size_t c = logits.shape()[1];
        auto& labels = data.labels[task];
        for (std::size_t i = 0; i < data.size(); ++i) {
            const auto row = logits.data().subspan(i * c, c);
            labels[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        }
    }
    save_net(net, tmp.path / "net.amlg");
    save_dataset(data, tmp.path / "test.amlg");

    const auto r = invoke({"eval", "--out", tmp.path.string(), "--net", (tmp.path / "net.amlg").string(), "--data",
                           tmp.path.string(), "--run-id", "perfect"});
    REQUIRE(r.code == cli::ok);
    CHECK(r.out.find("perfect,eval,0,is_red,accuracy,1\n") != std::string::npos);
    CHECK(r.out.find("perfect,eval,0,shape,accuracy,1\n") != std::string::npos);
}

TEST_CASE("dual-stage --seed 7 twice gives byte-identical metrics") {
    TempDir tmp;
    for (const char* out : {"a", "b"}) {
        auto run = kTiny;
        run.insert(run.begin(), {"dual-stage", "--seed", "7", "--out", (tmp.path / out).string()});
        REQUIRE(invoke(run).code == cli::ok);
    }
    const auto a = slurp(tmp.path / "a" / "dual-stage-seed7" / "metrics.csv");
    CHECK(a.rfind("run_id,stage,epoch,task,metric,value\n", 0) == 0);
    CHECK(a.find(",target,") != std::string::npos);
    CHECK(a == slurp(tmp.path / "b" / "dual-stage-seed7" / "metrics.csv"));
    CHECK(slurp(tmp.path / "a" / "dual-stage-seed7" / "target.amlg") ==
          slurp(tmp.path / "b" / "dual-stage-seed7" / "target.amlg"));
}

TEST_CASE("zoo pipeline from gen-data to stage 2") {
    TempDir tmp;
    const auto out = tmp.path.string(), zoo = (tmp.path / "zoo").string();
    auto with_tiny = [&](std::vector<std::string> args) {
        args.insert(args.end(), kTiny.begin(), kTiny.end());
        args.insert(args.end(), {"--out", out});
        return invoke(args);
    };
    REQUIRE(with_tiny({"gen-data", "--seed", "1", "--set", "n_teachers=2", "--run-id", "data"}).code == cli::ok);
    const auto data = (tmp.path / "data").string();
    REQUIRE(with_tiny({"train-teacher", "--data", data, "--zoo", zoo, "--tasks", "is_red", "--partition", "0"}).code ==
            cli::ok);
    REQUIRE(with_tiny({"train-teacher", "--data", data, "--zoo", zoo, "--tasks", "is_red,is_large", "--partition", "1"})
                .code == cli::ok);
    for (const char* task : {"is_red", "is_large"}) {
        REQUIRE(with_tiny({"amalgamate-stage1", "--data", data, "--zoo", zoo, "--tasks", task, "--run-id",
                           std::string("s1-") + task})
                    .code == cli::ok);
    }
    REQUIRE(with_tiny({"amalgamate-stage2", "--data", data, "--zoo", zoo, "--tasks", "is_red,is_large"}).code == cli::ok);

    const ZooRegistry reg(zoo);
    CHECK_NOTHROW(reg.verify());
    CHECK(reg.entries().size() == 5);
    CHECK(reg.lookup("target-is_large+is_red").role == NetRole::target);
    CHECK(fs::exists(tmp.path / "s1-is_red" / "amalgam_state.amlg"));

    // Registering the same teacher id again is a conflict.
    CHECK(with_tiny({"train-teacher", "--data", data, "--zoo", zoo, "--tasks", "is_red", "--partition", "0"}).code ==
          cli::validation_error);
}

TEST_CASE("resources table") {
    TempDir tmp;
    const auto r = invoke({"resources", "--out", tmp.path.string(), "--run-id", "res"});
    REQUIRE(r.code == cli::ok);
    CHECK(slurp(tmp.path / "res" / "metrics.csv").find("params_below_sources,1\n") != std::string::npos);
}
