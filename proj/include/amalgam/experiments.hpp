#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "amalgam/engine.hpp"
#include "amalgam/synthdata.hpp"

namespace amalgam {

// Desk-scale experiment settings shared by the CLI and the acceptance suite.
struct DeskConfig {
    SceneDistribution scenes;
    BlockNetSpec backbone;  // heads are replaced per source
    std::size_t teacher_samples = 100;
    std::size_t unlabeled = 2400;
    std::size_t test = 1000;
    AmalgamConfig teacher{.lr = 0.01, .epochs = 100};
    // Same step count as 1200 images x 30 epochs, over a wider transfer set.
    AmalgamConfig amalgam{.epochs = 15};
};

struct DeskData {
    std::vector<Dataset> partitions;
    Dataset unlabeled;
    Dataset test;
};

DeskData make_desk_data(const DeskConfig& cfg, std::size_t n_partitions, std::uint64_t seed);

// Source `index` ("s<index+1>") trained on partitions[index].
SourceNet train_source(const DeskConfig& cfg, const DeskData& data, const TaskSet& tasks, std::size_t index,
                       std::uint64_t seed);

// Source i is trained on partitions[i] for source_tasks[i].
std::vector<SourceNet> train_sources(const DeskConfig& cfg, const DeskData& data,
                                     const std::vector<TaskSet>& source_tasks, std::uint64_t seed);

using Accuracies = std::map<std::string, double>;

struct ComponentGain {
    std::vector<double> teacher_acc;
    double component_acc = 0.0;
    LossBreakdown history;
};

// Amalgamates the first `n_teachers` sources (all covering `task`) into a component net.
ComponentGain component_gain(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                             const std::string& task, std::size_t n_teachers);

struct TwoStageComparison {
    Accuracies dual;
    Accuracies one_shot;
    DualStageResult dual_result;
    AmalgamResult one_shot_result;
};

TwoStageComparison two_stage_vs_one_shot(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                                         const TaskSet& user_tasks);

struct AblationRow {
    std::string variant;  // kd, wo_tb, wo_ts, whole
    double accuracy = 0.0;
    LossBreakdown history;
};

std::vector<AblationRow> ablation(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                                  const std::string& task);

struct SweepPoint {
    std::size_t teachers = 0;
    double accuracy = 0.0;
    LossBreakdown history;
};

// Amalgamates from the first k sources for k in `counts`.
std::vector<SweepPoint> teacher_sweep(const DeskConfig& cfg, const DeskData& data, std::span<const SourceNet> pool,
                                      const std::string& task, const std::vector<std::size_t>& counts);

}  // namespace amalgam
