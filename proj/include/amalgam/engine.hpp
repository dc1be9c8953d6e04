#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "amalgam/blocknet.hpp"
#include "amalgam/bridge.hpp"
#include "amalgam/synthdata.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

// lambda_t of the soft target loss, one per (teacher, task head).
struct ScaleParam {
    std::size_t teacher_index = 0;
    std::string task_id;
    Tensor lambda = Tensor::scalar(1.0, true);
};

enum class AlignedChannels { student, teacher, min };

struct AmalgamConfig {
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double widen_factor = 1.5;
    AlignedChannels aligned_channels = AlignedChannels::student;
    FAInit fa_init = FAInit::unit_rows;
    bool disable_bridge = false;     // wo/TB
    bool disable_selection = false;  // wo/TS
    bool kd_only = false;            // plain distillation baseline
    bool per_task_selection = false;
    double entropy_clamp = 1e-12;
    double lambda_lr_scale = 0.01;   // step multiplier for every lambda
    double grad_clip = 1.0;          // joint gradient norm bound, 0 disables

    void validate() const;
};

struct StepRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    std::vector<double> l_a;    // per bridged block
    std::vector<double> l_reg;  // per bridged block
    double l_soft = 0.0;
    double l_total = 0.0;
    std::vector<std::size_t> selected;  // teacher index per sample (per task route when per-task)
    std::vector<double> lambdas;

    double resum() const;
};

struct MetricRecord {
    std::string stage;
    std::size_t epoch = 0;
    std::string task;
    std::string metric;
    double value = 0.0;
};

struct LossBreakdown {
    std::vector<StepRecord> steps;

    // Largest |l_total - (sum of parts)| over all steps.
    double max_consistency_gap() const;
    double epoch_mean_total(std::size_t epoch) const;
    std::vector<MetricRecord> epoch_metrics(const std::string& stage, const std::string& task) const;
};

Tensor soft_target_loss(const Tensor& student_logits, const Tensor& teacher_logits, const Tensor& lambda);

struct BlockTerms {
    Tensor l_a;
    Tensor l_reg;
};

// Sum over bridged blocks of (l_a + l_reg), plus the soft term.
Tensor total_loss(std::span<const BlockTerms> bridge_terms, const Tensor& soft, std::size_t num_blocks);

struct TeacherRef {
    const BlockNet* net = nullptr;
    TaskSet tasks;  // subset of the net's heads this teacher is trusted for
};

struct AmalgamResult {
    BlockNet student;
    LossBreakdown history;
    std::vector<std::vector<TransferBridge>> bridges;  // [teacher][bridged block]
    std::vector<ScaleParam> scales;
};

// Trains a copy of `student` from frozen teachers on unlabeled images [N,C,H,W].
AmalgamResult train_amalgamate(std::span<const TeacherRef> teachers, const BlockNet& student, const Tensor& unlabeled,
                               const AmalgamConfig& config);

// Supervised softmax cross-entropy over the given heads; trains `net` in place.
// Returns the mean loss of every epoch.
std::vector<double> train_supervised(BlockNet& net, const Dataset& data, const TaskSet& tasks,
                                     const AmalgamConfig& config);

// Accuracy per task; `tasks` empty means every head of the net.
std::map<std::string, double> evaluate(const BlockNet& net, const Dataset& labeled, const TaskSet& tasks = {});

struct SourceEntry {
    std::string id;
    TaskSet tasks;
};

// task -> ids of every source whose task set contains it.
std::map<std::string, std::vector<std::string>> cluster_sources(std::span<const SourceEntry> pool,
                                                                const TaskSet& user_tasks);

struct SourceNet {
    std::string id;
    BlockNet net;
    TaskSet tasks;
};

struct DualStageResult {
    std::map<std::string, BlockNet> components;
    BlockNet target;
    std::map<std::string, LossBreakdown> stage1;
    LossBreakdown stage2;
};

BlockNetSpec component_spec(const BlockNet& source, const std::string& task);
BlockNetSpec target_spec(const BlockNetSpec& component_backbone, std::span<const HeadSpec> heads, double widen_factor);

// Stage 1 (one component per task) followed by stage 2 (multi-task target).
DualStageResult dual_stage(std::span<const SourceNet> pool, const TaskSet& user_tasks, const Tensor& unlabeled,
                           const AmalgamConfig& config);

// Stage 2 only: components (one task each) into a fresh target.
AmalgamResult amalgamate_components(std::span<const SourceNet> components, const TaskSet& user_tasks,
                                    const Tensor& unlabeled, const AmalgamConfig& config);

// Stage 1 only for one task.
AmalgamResult amalgamate_component(std::span<const SourceNet> pool, const std::string& task, const Tensor& unlabeled,
                                   const AmalgamConfig& config);

// Baseline: every relevant source straight into the target, selection per task head.
AmalgamResult one_shot_amalgamate(std::span<const SourceNet> pool, const TaskSet& user_tasks, const Tensor& unlabeled,
                                  const AmalgamConfig& config);

}  // namespace amalgam
