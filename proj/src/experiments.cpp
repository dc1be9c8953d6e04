#include "amalgam/experiments.hpp"

namespace amalgam {

DeskData make_desk_data(const DeskConfig& cfg, std::size_t n_partitions, std::uint64_t seed) {
    if (n_partitions == 0) fail(ErrorKind::config, "need at least one teacher partition");
    const std::size_t total = n_partitions * cfg.teacher_samples + cfg.unlabeled + cfg.test;
    const Dataset all = generate(cfg.scenes, total, mix_seed(seed, 1));
    const double n = static_cast<double>(total);
    DatasetSplit s = split(all, n_partitions, static_cast<double>(cfg.unlabeled) / n, static_cast<double>(cfg.test) / n,
                           mix_seed(seed, 2));
    return {std::move(s.teacher_train), std::move(s.unlabeled), std::move(s.test)};
}

SourceNet train_source(const DeskConfig& cfg, const DeskData& data, const TaskSet& tasks, std::size_t index,
                       std::uint64_t seed) {
    if (index >= data.partitions.size()) fail(ErrorKind::config, "no teacher partition " + std::to_string(index));
    BlockNetSpec spec = cfg.backbone;
    spec.heads.clear();
    for (const auto& task : tasks) spec.heads.push_back({task, task_num_classes(task)});
    BlockNet net = BlockNet::build(spec, mix_seed(seed, 100 + index));
    AmalgamConfig tc = cfg.teacher;
    tc.seed = mix_seed(seed, 200 + index);
    train_supervised(net, data.partitions[index], tasks, tc);
    return {"s" + std::to_string(index + 1), std::move(net), tasks};
}

std::vector<SourceNet> train_sources(const DeskConfig& cfg, const DeskData& data,
                                     const std::vector<TaskSet>& source_tasks, std::uint64_t seed) {
    if (source_tasks.size() > data.partitions.size()) {
        fail(ErrorKind::config, "more sources than teacher partitions");
    }
    std::vector<SourceNet> pool;
    for (std::size_t i = 0; i < source_tasks.size(); ++i) pool.push_back(train_source(cfg, data, source_tasks[i], i, seed));
    return pool;
}

namespace {

std::vector<SourceNet> first_sources(std::span<const SourceNet> pool, std::size_t k) {
    if (k == 0 || k > pool.size()) fail(ErrorKind::config, "pool has " + std::to_string(pool.size()) + " sources, asked for " + std::to_string(k));
    return {pool.begin(), pool.begin() + static_cast<long>(k)};
}

double accuracy(const BlockNet& net, const Dataset& test, const std::string& task) {
    return evaluate(net, test, TaskSet{task}).at(task);
}

}  // namespace

ComponentGain component_gain(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                             const std::string& task, std::size_t n_teachers) {
    const auto teachers = first_sources(pool, n_teachers);
    ComponentGain out;
    for (const auto& t : teachers) out.teacher_acc.push_back(accuracy(t.net, data.test, task));
    auto res = amalgamate_component(teachers, task, data.unlabeled.images, cfg.amalgam);
    out.component_acc = accuracy(res.student, data.test, task);
    out.history = std::move(res.history);
    return out;
}

TwoStageComparison two_stage_vs_one_shot(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                                         const TaskSet& user_tasks) {
    auto dual = dual_stage(pool, user_tasks, data.unlabeled.images, cfg.amalgam);
    auto one = one_shot_amalgamate(pool, user_tasks, data.unlabeled.images, cfg.amalgam);
    TwoStageComparison out{evaluate(dual.target, data.test, user_tasks), evaluate(one.student, data.test, user_tasks),
                           std::move(dual), std::move(one)};
    return out;
}

std::vector<AblationRow> ablation(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                                  const std::string& task) {
    const auto teachers = first_sources(pool, 2);
    std::vector<AblationRow> rows;
    for (const std::string variant : {"kd", "wo_tb", "wo_ts", "whole"}) {
        AmalgamConfig c = cfg.amalgam;
        c.kd_only = variant == "kd";
        c.disable_bridge = variant == "wo_tb";
        c.disable_selection = variant == "wo_ts";
        auto res = amalgamate_component(teachers, task, data.unlabeled.images, c);
        rows.push_back({variant, accuracy(res.student, data.test, task), std::move(res.history)});
    }
    return rows;
}

std::vector<SweepPoint> teacher_sweep(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                                      const std::string& task, const std::vector<std::size_t>& counts) {
    std::vector<SweepPoint> out;
    for (auto k : counts) {
        auto res = amalgamate_component(first_sources(pool, k), task, data.unlabeled.images, cfg.amalgam);
        out.push_back({k, accuracy(res.student, data.test, task), std::move(res.history)});
    }
    return out;
}

}  // namespace amalgam
