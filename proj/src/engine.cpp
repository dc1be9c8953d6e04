#include "amalgam/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "amalgam/selector.hpp"

namespace amalgam {

void AmalgamConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) fail(ErrorKind::config, "lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::config, "momentum must lie in [0, 1)");
    if (batch_size < 1) fail(ErrorKind::config, "batch_size must be at least 1");
    if (!(widen_factor > 0.0)) fail(ErrorKind::config, "widen_factor must be positive");
    if (!(entropy_clamp > 0.0 && entropy_clamp < 1.0)) fail(ErrorKind::config, "entropy clamp must lie in (0, 1)");
    if (!(grad_clip >= 0.0) || !std::isfinite(grad_clip)) fail(ErrorKind::config, "grad_clip must be finite and non-negative");
    if (!(lambda_lr_scale >= 0.0) || !std::isfinite(lambda_lr_scale)) {
        fail(ErrorKind::config, "lambda_lr_scale must be finite and non-negative");
    }
}

double StepRecord::resum() const {
    double s = l_soft;
    for (double v : l_a) s += v;
    for (double v : l_reg) s += v;
    return s;
}

double LossBreakdown::max_consistency_gap() const {
    double gap = 0.0;
    for (const auto& s : steps) gap = std::max(gap, std::abs(s.l_total - s.resum()));
    return gap;
}

double LossBreakdown::epoch_mean_total(std::size_t epoch) const {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& s : steps) {
        if (s.epoch == epoch) {
            total += s.l_total;
            ++count;
        }
    }
    if (count == 0) fail(ErrorKind::not_found, "no steps recorded for epoch " + std::to_string(epoch));
    return total / static_cast<double>(count);
}

std::vector<MetricRecord> LossBreakdown::epoch_metrics(const std::string& stage, const std::string& task) const {
    std::vector<MetricRecord> out;
    std::size_t i = 0;
    while (i < steps.size()) {
        const std::size_t epoch = steps[i].epoch;
        double total = 0.0, soft = 0.0, la = 0.0, lreg = 0.0;
        std::size_t count = 0;
        for (; i < steps.size() && steps[i].epoch == epoch; ++i, ++count) {
            total += steps[i].l_total;
            soft += steps[i].l_soft;
            la += std::accumulate(steps[i].l_a.begin(), steps[i].l_a.end(), 0.0);
            lreg += std::accumulate(steps[i].l_reg.begin(), steps[i].l_reg.end(), 0.0);
        }
        const double n = static_cast<double>(count);
        out.push_back({stage, epoch, task, "l_total", total / n});
        out.push_back({stage, epoch, task, "l_soft", soft / n});
        out.push_back({stage, epoch, task, "l_a", la / n});
        out.push_back({stage, epoch, task, "l_reg", lreg / n});
    }
    return out;
}

Tensor soft_target_loss(const Tensor& student_logits, const Tensor& teacher_logits, const Tensor& lambda) {
    if (student_logits.shape() != teacher_logits.shape()) {
        fail(ErrorKind::shape, "soft target loss: logits " + shape_str(student_logits.shape()) + " vs " +
                                   shape_str(teacher_logits.shape()));
    }
    if (student_logits.shape().back() < 2) fail(ErrorKind::arity, "soft target loss needs at least 2 classes");
    // Mean over every element equals (1/C_cls)*||.||^2 averaged over the batch.
    Tensor diff = sub(student_logits, scale(teacher_logits.detach(), lambda));
    return mean(mul(diff, diff));
}

Tensor total_loss(std::span<const BlockTerms> bridge_terms, const Tensor& soft, std::size_t num_blocks) {
    if (num_blocks < 2 || bridge_terms.size() != num_blocks - 1) {
        fail(ErrorKind::arity, "expected " + std::to_string(num_blocks - 1) + " bridged blocks, got " +
                                   std::to_string(bridge_terms.size()));
    }
    Tensor total = soft;
    for (const auto& t : bridge_terms) total = add(total, add(t.l_a, t.l_reg));
    return total;
}

namespace {

constexpr std::size_t kInferenceChunk = 128;

// Frozen teacher outputs over the whole unlabeled set.
struct TeacherCache {
    std::vector<std::vector<double>> maps;  // per bridged block, [N * C*H*W]
    std::vector<Shape> map_shapes;          // per bridged block, [C,H,W]
    std::map<std::string, std::vector<double>> logits;
    std::map<std::string, std::size_t> classes;
};

std::vector<std::size_t> iota_rows(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    return rows;
}

TeacherCache cache_teacher(const BlockNet& net, const TaskSet& tasks, const Tensor& images, std::size_t bridged) {
    NoGradGuard no_grad;
    TeacherCache cache;
    const std::size_t n = images.dim(0);
    for (const auto& shape : net.spec().block_shapes()) {
        if (cache.map_shapes.size() == bridged) break;
        cache.map_shapes.push_back({shape[0], shape[1], shape[2]});
        cache.maps.emplace_back();
        cache.maps.back().reserve(n * numel(cache.map_shapes.back()));
    }
    for (const auto& task : tasks) cache.classes[task] = net.head(task).num_classes;
    for (std::size_t begin = 0; begin < n; begin += kInferenceChunk) {
        const auto rows = iota_rows(begin, std::min(n, begin + kInferenceChunk));
        auto feats = net.forward(take_rows(images, rows));
        for (std::size_t b = 0; b < bridged; ++b) {
            auto d = feats.maps[b].data();
            cache.maps[b].insert(cache.maps[b].end(), d.begin(), d.end());
        }
        for (const auto& task : tasks) {
            auto d = feats.logits.at(task).data();
            cache.logits[task].insert(cache.logits[task].end(), d.begin(), d.end());
        }
    }
    return cache;
}

Tensor gather(const std::vector<double>& flat, const Shape& item_shape, std::span<const std::size_t> rows) {
    const std::size_t stride = numel(item_shape);
    std::vector<double> out(rows.size() * stride);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy_n(flat.begin() + static_cast<long>(rows[r] * stride), stride, out.begin() + static_cast<long>(r * stride));
    }
    Shape shape{rows.size()};
    shape.insert(shape.end(), item_shape.begin(), item_shape.end());
    return Tensor(std::move(shape), std::move(out));
}

Tensor softmax_rows(const std::vector<double>& logits, std::size_t classes) {
    NoGradGuard no_grad;
    return softmax(Tensor({logits.size() / classes, classes}, logits));
}

struct Candidate {
    std::size_t teacher = 0;
    std::string task;
};

std::size_t aligned_width(AlignedChannels policy, std::size_t teacher_c, std::size_t student_c) {
    switch (policy) {
        case AlignedChannels::student: return student_c;
        case AlignedChannels::teacher: return teacher_c;
        case AlignedChannels::min: return std::min(teacher_c, student_c);
    }
    return student_c;
}

}  // namespace

AmalgamResult train_amalgamate(std::span<const TeacherRef> teachers, const BlockNet& student_init,
                               const Tensor& unlabeled, const AmalgamConfig& config) {
    config.validate();
    if (teachers.empty()) fail(ErrorKind::coverage, "amalgamation needs at least one teacher");
    if (unlabeled.rank() != 4 || unlabeled.dim(0) == 0) fail(ErrorKind::shape, "unlabeled data must be [N,C,H,W]");

    AmalgamResult result{student_init.clone(), {}, {}, {}};
    BlockNet& student = result.student;
    student.set_trainable(true);
    const auto& sspec = student.spec();
    const std::size_t num_blocks = student.num_blocks();
    const std::size_t bridged = num_blocks - 1;
    const auto student_shapes = sspec.block_shapes();

    for (std::size_t t = 0; t < teachers.size(); ++t) {
        const auto& tnet = *teachers[t].net;
        if (tnet.spec().input_shape != sspec.input_shape) {
            fail(ErrorKind::geometry, "teacher " + std::to_string(t) + " expects a different input shape");
        }
        const auto tshapes = tnet.spec().block_shapes();
        if (tshapes.size() != num_blocks) {
            fail(ErrorKind::geometry, "teacher " + std::to_string(t) + " has " + std::to_string(tshapes.size()) +
                                          " blocks, student has " + std::to_string(num_blocks));
        }
        for (std::size_t b = 0; b < num_blocks; ++b) {
            if (tshapes[b][1] != student_shapes[b][1] || tshapes[b][2] != student_shapes[b][2]) {
                fail(ErrorKind::geometry, "teacher " + std::to_string(t) + " block " + std::to_string(b) +
                                              " spatial size differs from the student");
            }
        }
        for (const auto& task : teachers[t].tasks) {
            if (!tnet.has_head(task)) fail(ErrorKind::coverage, "teacher " + std::to_string(t) + " has no head '" + task + "'");
        }
    }

    std::vector<Candidate> candidates;
    for (std::size_t t = 0; t < teachers.size(); ++t) {
        for (const auto& h : sspec.heads) {
            if (!teachers[t].tasks.contains(h.task_id)) continue;
            if (teachers[t].net->head(h.task_id).num_classes != h.num_classes) {
                fail(ErrorKind::shape, "teacher " + std::to_string(t) + " head '" + h.task_id + "' has a different class count");
            }
            candidates.push_back({t, h.task_id});
        }
    }
    for (const auto& h : sspec.heads) {
        if (std::none_of(candidates.begin(), candidates.end(), [&](const Candidate& c) { return c.task == h.task_id; })) {
            fail(ErrorKind::coverage, "no teacher covers student task '" + h.task_id + "'");
        }
    }

    const bool use_bridges = !config.kd_only && !config.disable_bridge;
    const bool use_selection = !config.kd_only && !config.disable_selection;
    const bool learn_lambda = !config.kd_only;

    // Routing scopes: one over all candidates, or one per student task.
    std::vector<std::vector<std::size_t>> scopes;
    if (config.per_task_selection) {
        for (const auto& h : sspec.heads) {
            std::vector<std::size_t> scope;
            for (std::size_t c = 0; c < candidates.size(); ++c) {
                if (candidates[c].task == h.task_id) scope.push_back(c);
            }
            scopes.push_back(std::move(scope));
        }
    } else {
        scopes.push_back(iota_rows(0, candidates.size()));
    }

    std::vector<TeacherCache> caches;
    for (std::size_t t = 0; t < teachers.size(); ++t) {
        caches.push_back(cache_teacher(*teachers[t].net, teachers[t].tasks, unlabeled, bridged));
    }

    const std::size_t n = unlabeled.dim(0);
    // Teachers are frozen, so the per-sample choice is fixed for the whole run.
    std::vector<std::vector<std::size_t>> choice(scopes.size());
    if (use_selection) {
        for (std::size_t s = 0; s < scopes.size(); ++s) {
            std::vector<TeacherBatchPrediction> preds;
            for (auto c : scopes[s]) {
                const auto& cand = candidates[c];
                const auto& cache = caches[cand.teacher];
                preds.push_back({c, cand.task, softmax_rows(cache.logits.at(cand.task), cache.classes.at(cand.task))});
            }
            choice[s] = select_batch(preds, config.entropy_clamp);
        }
    }

    std::mt19937_64 init_rng(mix_seed(config.seed, 11));
    result.bridges.resize(teachers.size());
    std::vector<Tensor> trainable = student.parameter_tensors();
    if (use_bridges) {
        for (std::size_t t = 0; t < teachers.size(); ++t) {
            const auto tshapes = teachers[t].net->spec().block_shapes();
            for (std::size_t b = 0; b < bridged; ++b) {
                const std::size_t width = aligned_width(config.aligned_channels, tshapes[b][0], student_shapes[b][0]);
                result.bridges[t].push_back(
                    make_bridge(b, tshapes[b][0], student_shapes[b][0], width, config.fa_init, init_rng));
                trainable.push_back(result.bridges[t].back().teacher_fa.weight);
                trainable.push_back(result.bridges[t].back().student_fa.weight);
            }
        }
    }
    std::vector<double> lr_scales(trainable.size(), 1.0);
    for (const auto& c : candidates) {
        result.scales.push_back({c.teacher, c.task, Tensor::scalar(1.0, learn_lambda)});
        if (learn_lambda) {
            trainable.push_back(result.scales.back().lambda);
            lr_scales.push_back(config.lambda_lr_scale);
        }
    }

    SgdMomentum optimizer(trainable, config.lr, config.momentum, lr_scales);
    std::mt19937_64 shuffle_rng(mix_seed(config.seed, 12));
    std::vector<std::size_t> order = iota_rows(0, n);

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
            const std::size_t end = std::min(n, begin + config.batch_size);
            const std::span<const std::size_t> batch(order.data() + begin, end - begin);
            const double bsize = static_cast<double>(batch.size());

            // candidate -> (local rows, weight per row)
            std::vector<std::vector<std::size_t>> rows(candidates.size());
            std::vector<double> row_weight(candidates.size(), 0.0);
            StepRecord rec;
            rec.epoch = epoch;
            rec.step = step;
            for (std::size_t s = 0; s < scopes.size(); ++s) {
                if (use_selection) {
                    for (std::size_t r = 0; r < batch.size(); ++r) {
                        const std::size_t c = choice[s][batch[r]];
                        rows[c].push_back(r);
                        row_weight[c] = 1.0 / bsize;
                        rec.selected.push_back(candidates[c].teacher);
                    }
                } else {
                    for (auto c : scopes[s]) {
                        rows[c] = iota_rows(0, batch.size());
                        row_weight[c] = 1.0 / (bsize * static_cast<double>(scopes[s].size()));
                    }
                }
            }

            BlockFeatures feats = student.forward(take_rows(unlabeled, batch));
            rec.l_a.assign(use_bridges ? bridged : 0, 0.0);
            rec.l_reg.assign(use_bridges ? bridged : 0, 0.0);
            Tensor loss;
            bool have_loss = false;
            for (std::size_t c = 0; c < candidates.size(); ++c) {
                if (rows[c].empty()) continue;
                const auto& cand = candidates[c];
                const auto& cache = caches[cand.teacher];
                const bool all_rows = rows[c].size() == batch.size();
                std::vector<std::size_t> global(rows[c].size());
                for (std::size_t r = 0; r < rows[c].size(); ++r) global[r] = batch[rows[c][r]];
                auto pick = [&](const Tensor& t) { return all_rows ? t : take_rows(t, rows[c]); };
                const double weight = row_weight[c] * static_cast<double>(rows[c].size());

                Tensor teacher_logits = gather(cache.logits.at(cand.task), {cache.classes.at(cand.task)}, global);
                Tensor soft = soft_target_loss(pick(feats.logits.at(cand.task)), teacher_logits, result.scales[c].lambda);
                rec.l_soft += weight * soft.item();
                Tensor group = soft;
                if (use_bridges) {
                    std::vector<BlockTerms> terms;
                    for (std::size_t b = 0; b < bridged; ++b) {
                        Tensor tmap = gather(cache.maps[b], cache.map_shapes[b], global);
                        auto bl = bridge_block_loss(result.bridges[cand.teacher][b], pick(feats.maps[b]), tmap);
                        rec.l_a[b] += weight * bl.l_a.item();
                        rec.l_reg[b] += weight * bl.l_reg.item();
                        terms.push_back({bl.l_a, bl.l_reg});
                    }
                    group = total_loss(terms, soft, num_blocks);
                }
                Tensor weighted = scale(group, weight);
                loss = have_loss ? add(loss, weighted) : weighted;
                have_loss = true;
            }
            rec.l_total = loss.item();
            for (const auto& sp : result.scales) rec.lambdas.push_back(sp.lambda.item());
            backward(loss);
            clip_grad_norm(optimizer.params(), config.grad_clip);
            optimizer.step();
            result.history.steps.push_back(std::move(rec));
            ++step;
        }
    }
    student.set_trainable(false);
    return result;
}

std::vector<double> train_supervised(BlockNet& net, const Dataset& data, const TaskSet& tasks,
                                     const AmalgamConfig& config) {
    config.validate();
    if (tasks.empty()) fail(ErrorKind::coverage, "supervised training needs at least one task");
    for (const auto& task : tasks) {
        net.head(task);
        if (!data.labels.contains(task)) fail(ErrorKind::coverage, "training data has no labels for '" + task + "'");
    }
    net.set_trainable(true);
    SgdMomentum optimizer(net.parameter_tensors(), config.lr, config.momentum);
    std::mt19937_64 rng(mix_seed(config.seed, 21));
    const std::size_t n = data.size();
    std::vector<std::size_t> order = iota_rows(0, n);
    std::vector<double> epoch_loss;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
            const std::span<const std::size_t> batch(order.data() + begin, std::min(n, begin + config.batch_size) - begin);
            auto feats = net.forward(take_rows(data.images, batch));
            Tensor loss;
            bool have = false;
            for (const auto& task : tasks) {
                std::vector<int> labels;
                labels.reserve(batch.size());
                for (auto r : batch) labels.push_back(data.labels.at(task)[r]);
                Tensor ce = cross_entropy(feats.logits.at(task), labels);
                loss = have ? add(loss, ce) : ce;
                have = true;
            }
            total += loss.item();
            ++batches;
            backward(loss);
            clip_grad_norm(optimizer.params(), config.grad_clip);
            optimizer.step();
        }
        epoch_loss.push_back(total / static_cast<double>(batches));
    }
    net.set_trainable(false);
    return epoch_loss;
}

std::map<std::string, double> evaluate(const BlockNet& net, const Dataset& labeled, const TaskSet& tasks) {
    const TaskSet scored = tasks.empty() ? net.task_set() : tasks;
    for (const auto& task : scored) {
        net.head(task);
        if (!labeled.labels.contains(task)) fail(ErrorKind::coverage, "test data has no labels for '" + task + "'");
    }
    NoGradGuard no_grad;
    std::map<std::string, std::size_t> correct;
    const std::size_t n = labeled.size();
    for (std::size_t begin = 0; begin < n; begin += kInferenceChunk) {
        const auto rows = iota_rows(begin, std::min(n, begin + kInferenceChunk));
        auto feats = net.forward(take_rows(labeled.images, rows));
        for (const auto& task : scored) {
            const Tensor& logits = feats.logits.at(task);
            const std::size_t c = logits.dim(1);
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const auto row = logits.data().subspan(r * c, c);
                const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
                if (best == labeled.labels.at(task)[rows[r]]) ++correct[task];
            }
        }
    }
    std::map<std::string, double> acc;
    for (const auto& task : scored) acc[task] = static_cast<double>(correct[task]) / static_cast<double>(n);
    return acc;
}

std::map<std::string, std::vector<std::string>> cluster_sources(std::span<const SourceEntry> pool,
                                                                const TaskSet& user_tasks) {
    std::map<std::string, std::vector<std::string>> groups;
    std::vector<std::string> missing;
    for (const auto& task : user_tasks) {
        auto& group = groups[task];
        for (const auto& src : pool) {
            if (src.tasks.contains(task)) group.push_back(src.id);
        }
        if (group.empty()) missing.push_back(task);
    }
    if (!missing.empty()) {
        std::string msg = "no source covers task(s):";
        for (const auto& m : missing) msg += " " + m;
        fail(ErrorKind::coverage, msg);
    }
    return groups;
}

BlockNetSpec component_spec(const BlockNet& source, const std::string& task) {
    BlockNetSpec spec = source.spec();
    spec.heads = {source.head(task)};
    return spec;
}

BlockNetSpec target_spec(const BlockNetSpec& component_backbone, std::span<const HeadSpec> heads, double widen_factor) {
    BlockNetSpec spec = component_backbone.widened(widen_factor);
    spec.heads.assign(heads.begin(), heads.end());
    return spec;
}

namespace {

std::vector<SourceEntry> entries_of(std::span<const SourceNet> pool) {
    std::vector<SourceEntry> entries;
    for (const auto& s : pool) entries.push_back({s.id, s.tasks});
    return entries;
}

const SourceNet& find_source(std::span<const SourceNet> pool, const std::string& id) {
    for (const auto& s : pool) {
        if (s.id == id) return s;
    }
    fail(ErrorKind::not_found, "no source named '" + id + "'");
}

AmalgamConfig derived(const AmalgamConfig& config, std::uint64_t stream) {
    AmalgamConfig c = config;
    c.seed = mix_seed(config.seed, stream);
    return c;
}

constexpr std::uint64_t kComponentStream = 1000;

// FNV-1a, so streams do not depend on the standard library's string hash.
std::uint64_t task_hash(const std::string& task) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : task) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}
constexpr std::uint64_t kTargetStream = 2000;

BlockNet fresh_target(const SourceNet& backbone_source, const std::string& first_task, std::span<const HeadSpec> heads,
                      const AmalgamConfig& config) {
    return BlockNet::build(target_spec(component_spec(backbone_source.net, first_task), heads, config.widen_factor),
                           mix_seed(config.seed, kTargetStream));
}

}  // namespace

AmalgamResult amalgamate_component(std::span<const SourceNet> pool, const std::string& task, const Tensor& unlabeled,
                                   const AmalgamConfig& config) {
    auto entries = entries_of(pool);
    const auto groups = cluster_sources(entries, TaskSet{task});
    const auto& ids = groups.at(task);
    std::vector<TeacherRef> teachers;
    for (const auto& id : ids) teachers.push_back({&find_source(pool, id).net, TaskSet{task}});
    const std::uint64_t stream = kComponentStream + task_hash(task) % 997;
    BlockNet student = BlockNet::build(component_spec(*teachers.front().net, task), mix_seed(config.seed, stream));
    return train_amalgamate(teachers, student, unlabeled, derived(config, stream));
}

AmalgamResult amalgamate_components(std::span<const SourceNet> components, const TaskSet& user_tasks,
                                    const Tensor& unlabeled, const AmalgamConfig& config) {
    if (components.empty()) fail(ErrorKind::coverage, "stage 2 needs at least one component net");
    auto entries = entries_of(components);
    const auto groups = cluster_sources(entries, user_tasks);
    std::vector<TeacherRef> teachers;
    std::vector<HeadSpec> heads;
    for (const auto& task : user_tasks) heads.push_back(find_source(components, groups.at(task).front()).net.head(task));
    for (const auto& c : components) {
        TaskSet shared;
        for (const auto& t : c.tasks) {
            if (user_tasks.contains(t)) shared.insert(t);
        }
        if (!shared.empty()) teachers.push_back({&c.net, shared});
    }
    const auto& first = find_source(components, groups.at(*user_tasks.begin()).front());
    BlockNet target = fresh_target(first, *user_tasks.begin(), heads, config);
    return train_amalgamate(teachers, target, unlabeled, derived(config, kTargetStream));
}

DualStageResult dual_stage(std::span<const SourceNet> pool, const TaskSet& user_tasks, const Tensor& unlabeled,
                           const AmalgamConfig& config) {
    config.validate();
    if (user_tasks.empty()) fail(ErrorKind::coverage, "no user tasks requested");
    auto entries = entries_of(pool);
    cluster_sources(entries, user_tasks);

    DualStageResult out{{}, BlockNet::build(BlockNetSpec{}, 0), {}, {}};
    std::vector<SourceNet> components;
    for (const auto& task : user_tasks) {
        auto res = amalgamate_component(pool, task, unlabeled, config);
        components.push_back({"component:" + task, res.student, TaskSet{task}});
        out.components.emplace(task, std::move(res.student));
        out.stage1.emplace(task, std::move(res.history));
    }
    auto stage2 = amalgamate_components(components, user_tasks, unlabeled, config);
    out.target = std::move(stage2.student);
    out.stage2 = std::move(stage2.history);
    return out;
}

AmalgamResult one_shot_amalgamate(std::span<const SourceNet> pool, const TaskSet& user_tasks, const Tensor& unlabeled,
                                  const AmalgamConfig& config) {
    config.validate();
    if (user_tasks.empty()) fail(ErrorKind::coverage, "no user tasks requested");
    auto entries = entries_of(pool);
    const auto groups = cluster_sources(entries, user_tasks);
    std::vector<TeacherRef> teachers;
    for (const auto& s : pool) {
        TaskSet shared;
        for (const auto& t : s.tasks) {
            if (user_tasks.contains(t)) shared.insert(t);
        }
        if (!shared.empty()) teachers.push_back({&s.net, shared});
    }
    std::vector<HeadSpec> heads;
    for (const auto& task : user_tasks) heads.push_back(find_source(pool, groups.at(task).front()).net.head(task));
    const auto& first = find_source(pool, groups.at(*user_tasks.begin()).front());
    BlockNet target = fresh_target(first, *user_tasks.begin(), heads, config);
    AmalgamConfig c = derived(config, kTargetStream);
    c.per_task_selection = true;
    return train_amalgamate(teachers, target, unlabeled, c);
}

}  // namespace amalgam
