#include "amalgam/cli.hpp"

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "amalgam/experiments.hpp"
#include "amalgam/gradcheck.hpp"
#include "amalgam/zoo.hpp"

namespace amalgam::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

std::string join(const TaskSet& tasks, const char* sep) {
    std::string out;
    for (const auto& t : tasks) out += (out.empty() ? "" : sep) + t;
    return out;
}

// Every key a run understands, with its default. Unknown keys are rejected.
std::map<std::string, std::string> default_keys() {
    const AmalgamConfig a;
    const DeskConfig d;
    return {
        {"lr", fmt_double(a.lr)},
        {"momentum", fmt_double(a.momentum)},
        {"epochs", std::to_string(d.amalgam.epochs)},
        {"batch_size", std::to_string(a.batch_size)},
        {"seed", "0"},
        {"widen_factor", fmt_double(a.widen_factor)},
        {"aligned_channels", "student"},
        {"fa_init", "unit_rows"},
        {"disable_bridge", "false"},
        {"disable_selection", "false"},
        {"kd_only", "false"},
        {"per_task_selection", "false"},
        {"entropy_clamp", fmt_double(a.entropy_clamp)},
        {"lambda_lr_scale", fmt_double(a.lambda_lr_scale)},
        {"grad_clip", fmt_double(a.grad_clip)},
        {"teacher_samples", std::to_string(d.teacher_samples)},
        {"unlabeled", std::to_string(d.unlabeled)},
        {"test", std::to_string(d.test)},
        {"teacher_epochs", std::to_string(d.teacher.epochs)},
        {"teacher_lr", fmt_double(d.teacher.lr)},
        {"teacher_batch_size", std::to_string(d.teacher.batch_size)},
        {"noise", fmt_double(d.scenes.noise)},
        {"n_teachers", "2"},
        {"max_teachers", "4"},
        {"seeds", "1"},
        {"source_tasks", "is_red+bright_background;is_red;bright_background;is_red+bright_background"},
        {"tasks", ""},
        {"out", "runs"},
        {"zoo", ""},
        {"data", ""},
        {"net", ""},
        {"net_id", ""},
        {"partition", "0"},
        {"run_id", ""},
    };
}

class RunConfig {
public:
    RunConfig() : values_(default_keys()) {}

    void set(const std::string& key, const std::string& value, const std::string& origin) {
        auto it = values_.find(key);
        if (it == values_.end()) fail(ErrorKind::config, "unknown config key '" + key + "' (" + origin + ")");
        it->second = value;
    }

    void load_file(const fs::path& path) {
        std::ifstream in(path);
        if (!in) fail(ErrorKind::io, "cannot read config file " + path.string());
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            const std::string where = path.string() + ":" + std::to_string(lineno);
            if (eq == std::string::npos) fail(ErrorKind::config, "expected 'key = value' at " + where);
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
        }
    }

    const std::string& str(const std::string& key) const { return values_.at(key); }

    double num(const std::string& key) const {
        const auto& v = str(key);
        try {
            std::size_t used = 0;
            const double d = std::stod(v, &used);
            if (used == v.size()) return d;
        } catch (const std::exception&) {
        }
        fail(ErrorKind::config, key + " must be a number, got '" + v + "'");
    }

    std::uint64_t count(const std::string& key) const {
        const auto& v = str(key);
        try {
            std::size_t used = 0;
            if (!v.empty() && v[0] != '-') {
                const auto n = std::stoull(v, &used);
                if (used == v.size()) return n;
            }
        } catch (const std::exception&) {
        }
        fail(ErrorKind::config, key + " must be a non-negative integer, got '" + v + "'");
    }

    bool flag(const std::string& key) const {
        const auto& v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        fail(ErrorKind::config, key + " must be true or false, got '" + v + "'");
    }

    TaskSet tasks(const std::string& fallback) const {
        const auto list = split_list(str("tasks").empty() ? fallback : str("tasks"), ',');
        return {list.begin(), list.end()};
    }

    AmalgamConfig amalgam() const {
        AmalgamConfig c;
        c.lr = num("lr");
        c.momentum = num("momentum");
        c.epochs = count("epochs");
        c.batch_size = count("batch_size");
        c.seed = count("seed");
        c.widen_factor = num("widen_factor");
        const auto& aligned = str("aligned_channels");
        if (aligned == "student") c.aligned_channels = AlignedChannels::student;
        else if (aligned == "teacher") c.aligned_channels = AlignedChannels::teacher;
        else if (aligned == "min") c.aligned_channels = AlignedChannels::min;
        else fail(ErrorKind::config, "aligned_channels must be student, teacher or min");
        const auto& init = str("fa_init");
        if (init == "unit_rows") c.fa_init = FAInit::unit_rows;
        else if (init == "zeros") c.fa_init = FAInit::zeros;
        else fail(ErrorKind::config, "fa_init must be unit_rows or zeros");
        c.disable_bridge = flag("disable_bridge");
        c.disable_selection = flag("disable_selection");
        c.kd_only = flag("kd_only");
        c.per_task_selection = flag("per_task_selection");
        c.entropy_clamp = num("entropy_clamp");
        c.lambda_lr_scale = num("lambda_lr_scale");
        c.grad_clip = num("grad_clip");
        c.validate();
        return c;
    }

    DeskConfig desk() const {
        DeskConfig d;
        d.teacher_samples = count("teacher_samples");
        d.unlabeled = count("unlabeled");
        d.test = count("test");
        d.scenes.noise = num("noise");
        d.amalgam = amalgam();
        d.teacher = d.amalgam;
        d.teacher.epochs = count("teacher_epochs");
        d.teacher.lr = num("teacher_lr");
        d.teacher.batch_size = count("teacher_batch_size");
        d.teacher.validate();
        return d;
    }

    std::vector<TaskSet> source_tasks() const {
        std::vector<TaskSet> out;
        for (const auto& group : split_list(str("source_tasks"), ';')) {
            const auto tasks = split_list(group, '+');
            out.emplace_back(tasks.begin(), tasks.end());
        }
        if (out.empty()) fail(ErrorKind::config, "source_tasks is empty");
        return out;
    }

    std::string dump() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
        return s;
    }

private:
    std::map<std::string, std::string> values_;
};

class Metrics {
public:
    Metrics(const fs::path& path, std::string run_id, std::ostream* echo)
        : out_(path, std::ios::trunc), run_id_(std::move(run_id)), echo_(echo) {
        if (!out_) fail(ErrorKind::io, "cannot write " + path.string());
        write("run_id,stage,epoch,task,metric,value");
    }

    void row(const std::string& stage, std::size_t epoch, const std::string& task, const std::string& metric,
             double value) {
        write(run_id_ + "," + stage + "," + std::to_string(epoch) + "," + task + "," + metric + "," + fmt_double(value));
    }

    void history(const std::string& stage, const std::string& task, const LossBreakdown& h) {
        for (const auto& m : h.epoch_metrics(stage, task)) row(m.stage, m.epoch, m.task, m.metric, m.value);
        if (!h.steps.empty()) row(stage, h.steps.back().epoch, task, "max_consistency_gap", h.max_consistency_gap());
    }

    void accuracies(const std::string& stage, std::size_t epoch, const std::map<std::string, double>& acc) {
        for (const auto& [task, v] : acc) row(stage, epoch, task, "accuracy", v);
    }

    void flush() {
        out_.flush();
        if (!out_) fail(ErrorKind::io, "write to metrics file failed");
    }

private:
    void write(const std::string& line) {
        out_ << line << '\n';
        if (echo_) *echo_ << line << '\n';
    }

    std::ofstream out_;
    std::string run_id_;
    std::ostream* echo_;
};

struct Run {
    RunConfig cfg;
    std::string command;
    std::string run_id;
    fs::path dir;
    std::ostream* out = nullptr;
};

Run open_run(RunConfig cfg, const std::string& command, std::ostream& out) {
    Run r{std::move(cfg), command, "", {}, &out};
    r.run_id = r.cfg.str("run_id");
    if (r.run_id.empty()) {
        r.run_id = command + "-seed" + r.cfg.str("seed");
        if (command == "train-teacher") r.run_id += "-p" + r.cfg.str("partition");
    }
    if (r.run_id.find_first_of("/\\,") != std::string::npos) fail(ErrorKind::config, "run_id may not contain '/', '\\' or ','");
    r.dir = fs::path(r.cfg.str("out")) / r.run_id;
    std::error_code ec;
    fs::create_directories(r.dir, ec);
    if (ec) fail(ErrorKind::io, "cannot create run directory " + r.dir.string());
    std::ofstream conf(r.dir / "config.resolved", std::ios::trunc);
    conf << "# " << command << "\n" << r.cfg.dump();
    if (!conf) fail(ErrorKind::io, "cannot write resolved config");
    out << "run " << r.run_id << " -> " << r.dir.string() << "\n";
    return r;
}

fs::path require_path(const RunConfig& cfg, const std::string& key) {
    if (cfg.str(key).empty()) fail(ErrorKind::usage, "--" + key + " is required for this command");
    return cfg.str(key);
}

struct DataDir {
    fs::path root;
    Dataset test() const { return load_dataset(root / "test.amlg"); }
    Dataset unlabeled() const { return load_dataset(root / "unlabeled.amlg"); }
    Dataset partition(std::size_t i) const { return load_dataset(root / ("partition_" + std::to_string(i) + ".amlg")); }
};

std::vector<SourceNet> zoo_nets(const ZooRegistry& zoo, NetRole role) {
    std::vector<SourceNet> out;
    for (const auto& e : zoo.entries()) {
        if (e.role == role) out.push_back({e.net_id, zoo.load(e.net_id), e.tasks});
    }
    return out;
}

void save_and_register(const Run& run, const std::string& id, const BlockNet& net, NetRole role) {
    save_net(net, run.dir / (id + ".amlg"));
    if (!run.cfg.str("zoo").empty()) ZooRegistry(run.cfg.str("zoo")).add_net(id, net, role);
}

// ---- subcommands --------------------------------------------------------------------

int cmd_gen_data(Run& run) {
    const auto desk = run.cfg.desk();
    const auto n = run.cfg.count("n_teachers");
    const auto data = make_desk_data(desk, n, run.cfg.count("seed"));
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    for (std::size_t i = 0; i < data.partitions.size(); ++i) {
        save_dataset(data.partitions[i], run.dir / ("partition_" + std::to_string(i) + ".amlg"));
        m.row("data", 0, "", "partition_" + std::to_string(i) + "_size", static_cast<double>(data.partitions[i].size()));
    }
    save_dataset(data.unlabeled, run.dir / "unlabeled.amlg");
    save_dataset(data.test, run.dir / "test.amlg");
    m.row("data", 0, "", "unlabeled_size", static_cast<double>(data.unlabeled.size()));
    m.row("data", 0, "", "test_size", static_cast<double>(data.test.size()));
    m.flush();
    return ok;
}

int cmd_train_teacher(Run& run) {
    const DataDir data{require_path(run.cfg, "data")};
    const auto desk = run.cfg.desk();
    const auto tasks = run.cfg.tasks("is_red");
    const auto part = run.cfg.count("partition");
    BlockNetSpec spec = desk.backbone;
    spec.heads.clear();
    for (const auto& t : tasks) spec.heads.push_back({t, task_num_classes(t)});
    BlockNet net = BlockNet::build(spec, mix_seed(run.cfg.count("seed"), 100 + part));
    AmalgamConfig tc = desk.teacher;
    tc.seed = mix_seed(run.cfg.count("seed"), 200 + part);
    const auto losses = train_supervised(net, data.partition(part), tasks, tc);
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    for (std::size_t e = 0; e < losses.size(); ++e) m.row("teacher", e, join(tasks, "+"), "train_loss", losses[e]);
    m.accuracies("teacher", losses.size(), evaluate(net, data.test(), tasks));
    const std::string id = run.cfg.str("net_id").empty() ? "teacher-p" + std::to_string(part) : run.cfg.str("net_id");
    save_and_register(run, id, net, NetRole::source);
    m.flush();
    return ok;
}

int cmd_stage1(Run& run) {
    const DataDir data{require_path(run.cfg, "data")};
    const ZooRegistry zoo(require_path(run.cfg, "zoo"));
    const auto tasks = run.cfg.tasks("");
    if (tasks.size() != 1) fail(ErrorKind::usage, "amalgamate-stage1 needs exactly one task in --tasks");
    const std::string task = *tasks.begin();
    const auto pool = zoo_nets(zoo, NetRole::source);
    auto res = amalgamate_component(pool, task, data.unlabeled().images, run.cfg.amalgam());
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    m.history("stage1", task, res.history);
    m.accuracies("stage1", run.cfg.count("epochs"), evaluate(res.student, data.test(), {task}));
    save_amalgam_state(res, run.dir / "amalgam_state.amlg");
    save_and_register(run, run.cfg.str("net_id").empty() ? "component-" + task : run.cfg.str("net_id"), res.student,
                      NetRole::component);
    m.flush();
    return ok;
}

int cmd_stage2(Run& run) {
    const DataDir data{require_path(run.cfg, "data")};
    const ZooRegistry zoo(require_path(run.cfg, "zoo"));
    const auto tasks = run.cfg.tasks("");
    if (tasks.empty()) fail(ErrorKind::usage, "amalgamate-stage2 needs --tasks");
    const auto components = zoo_nets(zoo, NetRole::component);
    auto res = amalgamate_components(components, tasks, data.unlabeled().images, run.cfg.amalgam());
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    m.history("stage2", join(tasks, "+"), res.history);
    m.accuracies("stage2", run.cfg.count("epochs"), evaluate(res.student, data.test(), tasks));
    save_amalgam_state(res, run.dir / "amalgam_state.amlg");
    save_and_register(run, run.cfg.str("net_id").empty() ? "target-" + join(tasks, "+") : run.cfg.str("net_id"),
                      res.student, NetRole::target);
    m.flush();
    return ok;
}

// Sources either come from a zoo (with --data) or are trained inside the run.
struct Pool {
    std::vector<SourceNet> sources;
    Tensor unlabeled;
    Dataset test;
};

Pool make_pool(const Run& run, Metrics& m) {
    Pool p;
    if (!run.cfg.str("zoo").empty()) {
        const DataDir data{require_path(run.cfg, "data")};
        p.sources = zoo_nets(ZooRegistry(run.cfg.str("zoo")), NetRole::source);
        p.unlabeled = data.unlabeled().images;
        p.test = data.test();
    } else {
        const auto desk = run.cfg.desk();
        const auto groups = run.cfg.source_tasks();
        const auto seed = run.cfg.count("seed");
        auto data = make_desk_data(desk, groups.size(), seed);
        p.sources = train_sources(desk, data, groups, seed);
        p.unlabeled = data.unlabeled.images;
        p.test = std::move(data.test);
    }
    for (const auto& s : p.sources) {
        for (const auto& [task, acc] : evaluate(s.net, p.test, s.tasks)) m.row("source." + s.id, 0, task, "accuracy", acc);
    }
    return p;
}

int cmd_dual_stage(Run& run) {
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    const auto pool = make_pool(run, m);
    const auto tasks = run.cfg.tasks("is_red,bright_background");
    const auto cfg = run.cfg.amalgam();
    auto res = dual_stage(pool.sources, tasks, pool.unlabeled, cfg);
    for (const auto& [task, hist] : res.stage1) {
        m.history("stage1", task, hist);
        m.accuracies("stage1", cfg.epochs, evaluate(res.components.at(task), pool.test, {task}));
        save_net(res.components.at(task), run.dir / ("component-" + task + ".amlg"));
    }
    m.history("stage2", join(tasks, "+"), res.stage2);
    m.accuracies("target", cfg.epochs, evaluate(res.target, pool.test, tasks));
    save_net(res.target, run.dir / "target.amlg");
    m.flush();
    return ok;
}

int cmd_one_shot(Run& run) {
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    const auto pool = make_pool(run, m);
    const auto tasks = run.cfg.tasks("is_red,bright_background");
    const auto cfg = run.cfg.amalgam();
    auto res = one_shot_amalgamate(pool.sources, tasks, pool.unlabeled, cfg);
    m.history("one_shot", join(tasks, "+"), res.history);
    m.accuracies("target", cfg.epochs, evaluate(res.student, pool.test, tasks));
    save_net(res.student, run.dir / "target.amlg");
    save_amalgam_state(res, run.dir / "amalgam_state.amlg");
    m.flush();
    return ok;
}

int cmd_eval(Run& run) {
    BlockNet net = [&] {
        if (!run.cfg.str("net").empty()) return load_net(run.cfg.str("net"));
        if (run.cfg.str("zoo").empty() || run.cfg.str("net_id").empty()) {
            fail(ErrorKind::usage, "eval needs --net PATH or --zoo DIR with --net-id ID");
        }
        return ZooRegistry(run.cfg.str("zoo")).load(run.cfg.str("net_id"));
    }();
    const fs::path data = require_path(run.cfg, "data");
    const Dataset test = load_dataset(fs::is_directory(data) ? data / "test.amlg" : data);
    Metrics m(run.dir / "metrics.csv", run.run_id, run.out);
    m.accuracies("eval", 0, evaluate(net, test, run.cfg.tasks("")));
    m.flush();
    return ok;
}

std::string only_task(const RunConfig& cfg, const std::string& fallback) {
    const auto tasks = cfg.tasks(fallback);
    if (tasks.size() != 1) fail(ErrorKind::usage, "this command takes exactly one task");
    return *tasks.begin();
}

int cmd_ablate(Run& run) {
    const auto desk = run.cfg.desk();
    const auto task = only_task(run.cfg, "is_red");
    const auto seeds = run.cfg.count("seeds");
    const auto first = run.cfg.count("seed");
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    std::map<std::string, double> total;
    for (std::uint64_t s = first; s < first + seeds; ++s) {
        const auto data = make_desk_data(desk, 2, s);
        const auto pool = train_sources(desk, data, {{task}, {task}}, s);
        for (const auto& src : pool) m.row("source." + src.id, s, task, "accuracy", evaluate(src.net, data.test).at(task));
        for (const auto& row : ablation(desk, data, pool, task)) {
            m.row(row.variant, s, task, "accuracy", row.accuracy);
            m.row(row.variant, s, task, "max_consistency_gap", row.history.max_consistency_gap());
            total[row.variant] += row.accuracy;
        }
    }
    for (const auto& [variant, sum] : total) {
        m.row(variant, 0, task, "mean_accuracy", sum / static_cast<double>(seeds));
        *run.out << variant << " mean accuracy " << fmt_double(sum / static_cast<double>(seeds)) << "\n";
    }
    m.flush();
    return ok;
}

int cmd_teacher_sweep(Run& run) {
    const auto desk = run.cfg.desk();
    const auto task = only_task(run.cfg, "is_red");
    const auto max_t = run.cfg.count("max_teachers");
    if (max_t < 2) fail(ErrorKind::config, "max_teachers must be at least 2");
    const auto seeds = run.cfg.count("seeds");
    const auto first = run.cfg.count("seed");
    std::vector<std::size_t> counts(max_t - 1);
    std::iota(counts.begin(), counts.end(), 2);
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    std::map<std::size_t, double> total;
    for (std::uint64_t s = first; s < first + seeds; ++s) {
        const auto data = make_desk_data(desk, max_t, s);
        const auto pool = train_sources(desk, data, std::vector<TaskSet>(max_t, TaskSet{task}), s);
        for (const auto& p : teacher_sweep(desk, data, pool, task, counts)) {
            m.row("teachers_" + std::to_string(p.teachers), s, task, "accuracy", p.accuracy);
            total[p.teachers] += p.accuracy;
        }
    }
    for (const auto& [k, sum] : total) {
        m.row("teachers_" + std::to_string(k), 0, task, "mean_accuracy", sum / static_cast<double>(seeds));
        *run.out << k << " teachers mean accuracy " << fmt_double(sum / static_cast<double>(seeds)) << "\n";
    }
    m.flush();
    return ok;
}

int cmd_resources(Run& run) {
    const auto tasks = run.cfg.tasks("is_red,bright_background");
    const auto cfg = run.cfg.amalgam();
    std::vector<std::pair<std::string, BlockNetSpec>> sources;
    if (!run.cfg.str("zoo").empty()) {
        for (const auto& s : zoo_nets(ZooRegistry(run.cfg.str("zoo")), NetRole::source)) sources.emplace_back(s.id, s.net.spec());
    } else {
        const auto groups = run.cfg.source_tasks();
        for (std::size_t i = 0; i < groups.size(); ++i) {
            BlockNetSpec spec = DeskConfig{}.backbone;
            for (const auto& t : groups[i]) spec.heads.push_back({t, task_num_classes(t)});
            sources.emplace_back("s" + std::to_string(i + 1), spec);
        }
    }
    std::vector<SourceEntry> entries;
    for (const auto& [id, spec] : sources) {
        TaskSet ts;
        for (const auto& h : spec.heads) ts.insert(h.task_id);
        entries.push_back({id, ts});
    }
    const auto groups = cluster_sources(entries, tasks);
    auto spec_of = [&](const std::string& id) {
        for (const auto& [sid, spec] : sources) {
            if (sid == id) return spec;
        }
        fail(ErrorKind::not_found, "unknown source " + id);
    };

    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    auto report = [&](const std::string& stage, const std::string& name, const ResourceCount& r) {
        m.row(stage, 0, name, "params", static_cast<double>(r.params));
        m.row(stage, 0, name, "flops", static_cast<double>(r.flops_per_image));
        char line[160];
        std::snprintf(line, sizeof line, "%-10s %-28s %12" PRIu64 " %14" PRIu64 "\n", stage.c_str(), name.c_str(), r.params,
                      r.flops_per_image);
        *run.out << line;
    };
    char header[160];
    std::snprintf(header, sizeof header, "%-10s %-28s %12s %14s\n", "role", "net", "params", "flops/image");
    *run.out << header;

    ResourceCount total_sources;
    TaskSet used;
    for (const auto& [task, ids] : groups) used.insert(ids.begin(), ids.end());
    for (const auto& id : used) {
        const auto r = BlockNet::build(spec_of(id), 0).count_resources();
        report("source", id, r);
        total_sources += r;
    }
    report("sources", "total", total_sources);
    std::vector<HeadSpec> heads;
    for (const auto& task : tasks) {
        const auto src = spec_of(groups.at(task).front());
        BlockNetSpec comp = src;
        comp.heads.clear();
        for (const auto& h : src.heads) {
            if (h.task_id == task) comp.heads.push_back(h);
        }
        heads.push_back(comp.heads.front());
        report("component", task, BlockNet::build(comp, 0).count_resources());
    }
    BlockNetSpec backbone = spec_of(groups.at(*tasks.begin()).front());
    const auto target = BlockNet::build(target_spec(backbone, heads, cfg.widen_factor), 0).count_resources();
    report("target", join(tasks, "+"), target);
    m.row("target", 0, join(tasks, "+"), "params_below_sources", target.params < total_sources.params ? 1.0 : 0.0);
    m.flush();
    return ok;
}

int cmd_gradcheck(Run& run) {
    const auto seeds = std::max<std::uint64_t>(run.cfg.count("seeds"), 5);
    Metrics m(run.dir / "metrics.csv", run.run_id, nullptr);
    double worst = 0.0;
    std::map<std::string, double> per_op;
    for (const auto& c : gradient_suite(seeds)) {
        m.row("gradcheck", c.seed, c.op, "relative_error", c.relative_error);
        per_op[c.op] = std::max(per_op[c.op], c.relative_error);
        worst = std::max(worst, c.relative_error);
    }
    for (const auto& [op, err] : per_op) {
        *run.out << (err < 1e-6 ? "ok   " : "FAIL ") << op << " max relative error " << fmt_double(err) << "\n";
    }
    m.flush();
    if (worst >= 1e-6) fail(ErrorKind::config, "gradient check exceeded 1e-6 (worst " + fmt_double(worst) + ")");
    return ok;
}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return usage_error;
        case ErrorKind::io: return io_error;
        default: return validation_error;
    }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Adaptive knowledge amalgamation at desk scale", "amalgam"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::map<std::string, std::string> flags;
    auto value_opt = [&](const std::string& name, const std::string& key, const std::string& help) {
        app.add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags[key] = v; }, help);
    };
    auto switch_opt = [&](const std::string& name, const std::string& key, const std::string& help) {
        app.add_flag_function(name, [&flags, key](std::int64_t) { flags[key] = "true"; }, help);
    };
    app.add_option("--config", config_path, "key = value config file");
    app.add_option("--set", overrides, "extra KEY=VALUE override (repeatable)");
    value_opt("--seed", "seed", "random seed (u64)");
    value_opt("--out", "out", "directory that holds run directories");
    value_opt("--zoo", "zoo", "model zoo directory");
    value_opt("--tasks", "tasks", "comma-separated task ids");
    value_opt("--epochs", "epochs", "amalgamation epochs");
    value_opt("--lr", "lr", "learning rate");
    value_opt("--batch", "batch_size", "batch size");
    value_opt("--data", "data", "data directory from gen-data (or a dataset file for eval)");
    value_opt("--net", "net", "checkpoint file for eval");
    value_opt("--net-id", "net_id", "zoo id to read or write");
    value_opt("--partition", "partition", "teacher partition index");
    value_opt("--run-id", "run_id", "run directory name");
    switch_opt("--no-bridge", "disable_bridge", "wo/TB ablation");
    switch_opt("--no-selection", "disable_selection", "wo/TS ablation");
    switch_opt("--kd-only", "kd_only", "plain distillation baseline");

    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "generate the synthetic dataset and its split"},
        {"train-teacher", "supervised training of one source net"},
        {"amalgamate-stage1", "component net for one task from the zoo sources"},
        {"amalgamate-stage2", "target net from the zoo component nets"},
        {"dual-stage", "stage 1 then stage 2"},
        {"one-shot", "sources straight into the target"},
        {"eval", "accuracy of a checkpoint on a labeled set"},
        {"ablate", "KD / wo-TB / wo-TS / whole grid"},
        {"teacher-sweep", "amalgamate from 2..max_teachers sources"},
        {"resources", "parameter and FLOP table"},
        {"gradcheck", "finite-difference suite over every differentiable op"},
    };
    for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return ok;
    } catch (const CLI::ParseError& e) {
        err << "ERROR " << usage_error << " usage: " << e.what() << "\n";
        return usage_error;
    }
    const std::string command = app.get_subcommands().front()->get_name();

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) fail(ErrorKind::usage, "--set expects KEY=VALUE, got '" + kv + "'");
            cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)), "--set");
        }
        for (const auto& [k, v] : flags) cfg.set(k, v, "flag");
        cfg.amalgam();  // validate before any work

        Run r = open_run(std::move(cfg), command, out);
        if (command == "gen-data") return cmd_gen_data(r);
        if (command == "train-teacher") return cmd_train_teacher(r);
        if (command == "amalgamate-stage1") return cmd_stage1(r);
        if (command == "amalgamate-stage2") return cmd_stage2(r);
        if (command == "dual-stage") return cmd_dual_stage(r);
        if (command == "one-shot") return cmd_one_shot(r);
        if (command == "eval") return cmd_eval(r);
        if (command == "ablate") return cmd_ablate(r);
        if (command == "teacher-sweep") return cmd_teacher_sweep(r);
        if (command == "resources") return cmd_resources(r);
        return cmd_gradcheck(r);
    } catch (const Error& e) {
        const int code = exit_code_for(e.kind());
        err << "ERROR " << code << " " << to_string(e.kind()) << ": " << e.what() << "\n";
        return code;
    } catch (const std::exception& e) {
        err << "ERROR " << validation_error << " internal: " << e.what() << "\n";
        return validation_error;
    }
}

}  // namespace amalgam::cli
