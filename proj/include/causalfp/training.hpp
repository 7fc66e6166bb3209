#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "causalfp/common.hpp"
#include "causalfp/csv.hpp"
#include "causalfp/rng.hpp"
#include "causalfp/taskgnn.hpp"

namespace causalfp::gnn {

enum class Precision { float64, float32 };

inline std::string to_string(Precision p) { return p == Precision::float64 ? "float64" : "float32"; }

inline Precision precision_from_string(const std::string& s) {
    if (s == "float64") return Precision::float64;
    if (s == "float32") return Precision::float32;
    throw ValidationError("unknown precision '" + s + "'");
}

struct TrainConfig {
    int hidden = 32;
    int heads = 2;
    double pool_ratio = 0.5;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int epochs = 200;
    int batch_size = 16;
    std::uint64_t seed = 1;
    double split_fraction = 0.5;  // train share
    Precision precision = Precision::float32;

    void validate() const {
        if (!(split_fraction > 0.0 && split_fraction < 1.0))
            throw ValidationError("split_fraction must lie strictly between 0 and 1");
        if (epochs < 1 || batch_size < 1) throw ValidationError("epochs and batch_size must be positive");
        if (lr <= 0.0 || weight_decay < 0.0) throw ValidationError("bad optimizer settings");
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    return nlohmann::json{{"hidden", cfg.hidden},
                          {"heads", cfg.heads},
                          {"pool_ratio", cfg.pool_ratio},
                          {"lr", cfg.lr},
                          {"weight_decay", cfg.weight_decay},
                          {"epochs", cfg.epochs},
                          {"batch_size", cfg.batch_size},
                          {"seed", cfg.seed},
                          {"split_fraction", cfg.split_fraction},
                          {"precision", to_string(cfg.precision)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    try {
        if (j.contains("hidden")) cfg.hidden = j.at("hidden").get<int>();
        if (j.contains("heads")) cfg.heads = j.at("heads").get<int>();
        if (j.contains("pool_ratio")) cfg.pool_ratio = j.at("pool_ratio").get<double>();
        if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
        if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
        if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
        if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("split_fraction")) cfg.split_fraction = j.at("split_fraction").get<double>();
        if (j.contains("precision")) cfg.precision = precision_from_string(j.at("precision").get<std::string>());
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(std::string("malformed training config: ") + ex.what());
    }
    cfg.validate();
    return cfg;
}

// Adam with decoupled weight decay. A parameter with zero gradient still
// shrinks by exactly (1 - lr*wd) per step.
template <typename S>
class AdamW {
public:
    AdamW(GnnParams<S>& params, double lr, double weight_decay)
        : lr_(static_cast<S>(lr)), wd_(static_cast<S>(weight_decay)) {
        params.for_each_tensor([&](const std::string&, MatX<S>& t) {
            m_.push_back(MatX<S>::Zero(t.rows(), t.cols()));
            v_.push_back(MatX<S>::Zero(t.rows(), t.cols()));
        });
    }

    void step(GnnParams<S>& params, GnnParams<S>& grads) {
        ++t_;
        const S b1 = S(0.9), b2 = S(0.999), eps = S(1e-8);
        const S bc1 = S(1) - std::pow(b1, static_cast<S>(t_));
        const S bc2 = S(1) - std::pow(b2, static_cast<S>(t_));
        std::size_t idx = 0;
        std::vector<MatX<S>*> gs;
        grads.for_each_tensor([&](const std::string&, MatX<S>& g) { gs.push_back(&g); });
        params.for_each_tensor([&](const std::string&, MatX<S>& p) {
            MatX<S>& g = *gs[idx];
            MatX<S>& m = m_[idx];
            MatX<S>& v = v_[idx];
            m = b1 * m + (S(1) - b1) * g;
            v = (b2 * v.array() + (S(1) - b2) * g.array().square()).matrix();
            p.array() -= lr_ * wd_ * p.array();
            p.array() -= lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
            ++idx;
        });
    }

private:
    S lr_, wd_;
    long t_ = 0;
    std::vector<MatX<S>> m_, v_;
};

struct EpochStats {
    double train_loss = 0.0;
    double test_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    Eigen::MatrixXd confusion;  // rows = true class, cols = predicted
};

template <typename S>
int predict(const GnnParams<S>& params, const TaskGraph& graph) {
    const VecX<S> logits = forward_graph(params, graph);
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<int>(best);
}

template <typename S>
EvalResult evaluate(const GnnParams<S>& params, const std::vector<TaskGraph>& dataset) {
    if (dataset.empty()) throw ValidationError("evaluate: empty dataset");
    const int C = params.cfg.classes;
    EvalResult res;
    res.confusion = Eigen::MatrixXd::Zero(C, C);
    for (const auto& g : dataset) {
        if (g.label < 0 || g.label >= C)
            throw ValidationError("graph label out of range for subject " + g.subject_id);
        res.confusion(g.label, predict(params, g)) += 1.0;
    }
    res.per_class_accuracy.assign(static_cast<std::size_t>(C), 0.0);
    double correct = 0.0;
    for (int c = 0; c < C; ++c) {
        const double row = res.confusion.row(c).sum();
        if (row > 0.0) res.per_class_accuracy[static_cast<std::size_t>(c)] = res.confusion(c, c) / row;
        correct += res.confusion(c, c);
    }
    res.accuracy = correct / static_cast<double>(dataset.size());
    return res;
}

template <typename S>
std::pair<double, double> mean_loss_and_accuracy(const GnnParams<S>& params, const std::vector<TaskGraph>& data,
                                                 const std::vector<std::size_t>& indices) {
    double loss = 0.0;
    double correct = 0.0;
    for (const std::size_t i : indices) {
        ForwardTrace<S> t;
        forward_graph(params, data[i], &t);
        loss += static_cast<double>(cross_entropy<S>(t.logits, data[i].label));
        Eigen::Index best = 0;
        t.logits.maxCoeff(&best);
        if (static_cast<int>(best) == data[i].label) correct += 1.0;
    }
    const double n = static_cast<double>(indices.size());
    return {loss / n, correct / n};
}

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

// Stratified by class label: each class is shuffled and cut at the split
// fraction independently.
inline Split stratified_split(const std::vector<TaskGraph>& dataset, double fraction, Rng& rng) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset[i].label].push_back(i);
    Split split;
    for (auto& [label, idx] : by_class) {
        rng.shuffle(idx);
        const auto n_train = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_train ? split.train : split.test).push_back(idx[i]);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

template <typename S>
struct TrainOutput {
    GnnParams<S> params;
    std::vector<EpochStats> history;
    Split split;
};

template <typename S>
TrainOutput<S> train_impl(const std::vector<TaskGraph>& dataset, const GnnConfig& net_cfg, const TrainConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Rng split_rng = rng.child(0);
    Rng init_rng = rng.child(1);
    Rng shuffle_rng = rng.child(2);

    TrainOutput<S> out;
    out.split = stratified_split(dataset, cfg.split_fraction, split_rng);
    if (out.split.train.empty() || out.split.test.empty())
        throw ValidationError("degenerate train/test split; adjust split_fraction or dataset size");

    out.params = init_params<S>(net_cfg, init_rng.next_u64());
    AdamW<S> opt(out.params, cfg.lr, cfg.weight_decay);

    std::vector<std::size_t> order = out.split.train;
    out.history.reserve(static_cast<std::size_t>(cfg.epochs));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<TaskGraph> graphs;
            graphs.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) graphs.push_back(dataset[order[i]]);
            auto [loss, grads] = loss_and_gradients(out.params, graphs);
            (void)loss;
            opt.step(out.params, grads);
        }
        EpochStats stats;
        std::tie(stats.train_loss, stats.train_acc) = mean_loss_and_accuracy(out.params, dataset, out.split.train);
        std::tie(stats.test_loss, stats.test_acc) = mean_loss_and_accuracy(out.params, dataset, out.split.test);
        out.history.push_back(stats);
        log(LogLevel::debug, "epoch " + std::to_string(epoch) + " train_loss=" + std::to_string(stats.train_loss) +
                                 " test_acc=" + std::to_string(stats.test_acc));
    }
    return out;
}

// Trained model with double-precision master weights regardless of the
// precision used during optimization.
struct GnnModel {
    GnnConfig cfg;
    GnnParams<double> params;
    std::vector<std::string> class_names;
    TrainConfig train_cfg;
    std::vector<EpochStats> history;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
};

template <typename From>
GnnParams<double> to_double(const GnnParams<From>& p) {
    GnnParams<double> out;
    out.cfg = p.cfg;
    out.gat1.resize(p.gat1.size());
    out.gat2.resize(p.gat2.size());
    for (std::size_t k = 0; k < p.gat1.size(); ++k) {
        out.gat1[k].W = p.gat1[k].W.template cast<double>();
        out.gat1[k].a_self = p.gat1[k].a_self.template cast<double>();
        out.gat1[k].a_nbr = p.gat1[k].a_nbr.template cast<double>();
    }
    for (std::size_t k = 0; k < p.gat2.size(); ++k) {
        out.gat2[k].W = p.gat2[k].W.template cast<double>();
        out.gat2[k].a_self = p.gat2[k].a_self.template cast<double>();
        out.gat2[k].a_nbr = p.gat2[k].a_nbr.template cast<double>();
    }
    out.skip1 = p.skip1.template cast<double>();
    out.skip2 = p.skip2.template cast<double>();
    out.pool_p = p.pool_p.template cast<double>();
    out.v2_Wl = p.v2_Wl.template cast<double>();
    out.v2_Wr = p.v2_Wr.template cast<double>();
    out.v2_a = p.v2_a.template cast<double>();
    out.head_W = p.head_W.template cast<double>();
    out.head_b = p.head_b.template cast<double>();
    return out;
}

// Precision-dispatching entry point. Deterministic given (seed, precision).
inline GnnModel train(const std::vector<TaskGraph>& dataset, const std::vector<std::string>& class_names,
                      const TrainConfig& cfg) {
    if (dataset.empty()) throw ValidationError("train: empty dataset");
    std::map<int, int> counts;
    for (const auto& g : dataset) counts[g.label]++;
    if (counts.size() < 2) throw ValidationError("train: need at least two classes present in the dataset");

    GnnConfig net_cfg;
    net_cfg.in_dim = dataset.front().feature_dim();
    net_cfg.hidden = cfg.hidden;
    net_cfg.heads = cfg.heads;
    net_cfg.pool_ratio = cfg.pool_ratio;
    net_cfg.classes = static_cast<int>(class_names.size());

    GnnModel model;
    model.cfg = net_cfg;
    model.class_names = class_names;
    model.train_cfg = cfg;
    if (cfg.precision == Precision::float64) {
        auto out = train_impl<double>(dataset, net_cfg, cfg);
        model.params = std::move(out.params);
        model.history = std::move(out.history);
        model.train_indices = std::move(out.split.train);
        model.test_indices = std::move(out.split.test);
    } else {
        auto out = train_impl<float>(dataset, net_cfg, cfg);
        model.params = to_double(out.params);
        model.history = std::move(out.history);
        model.train_indices = std::move(out.split.train);
        model.test_indices = std::move(out.split.test);
    }
    return model;
}

// --- model (de)serialization: JSON arrays with shape metadata ---

namespace detail {

inline nlohmann::json tensor_to_json(const MatX<double>& t) {
    nlohmann::json values = nlohmann::json::array();
    for (Eigen::Index i = 0; i < t.rows(); ++i)
        for (Eigen::Index j = 0; j < t.cols(); ++j) values.push_back(t(i, j));
    return nlohmann::json{{"rows", t.rows()}, {"cols", t.cols()}, {"values", std::move(values)}};
}

inline MatX<double> tensor_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto values = j.at("values").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != rows * cols)
        throw ValidationError("tensor payload does not match its declared shape");
    MatX<double> t(rows, cols);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j2 = 0; j2 < cols; ++j2) t(i, j2) = values[static_cast<std::size_t>(k++)];
    return t;
}

}  // namespace detail

inline nlohmann::json model_to_json(const GnnModel& model) {
    nlohmann::json j;
    j["kind"] = "task_gnn";
    j["config"] = {{"in_dim", model.cfg.in_dim},
                   {"hidden", model.cfg.hidden},
                   {"heads", model.cfg.heads},
                   {"pool_ratio", model.cfg.pool_ratio},
                   {"classes", model.cfg.classes}};
    j["classes"] = model.class_names;
    j["train_config"] = train_config_to_json(model.train_cfg);
    nlohmann::json tensors;
    model.params.for_each_tensor(
        [&](const std::string& name, const MatX<double>& t) { tensors[name] = detail::tensor_to_json(t); });
    j["tensors"] = std::move(tensors);
    return j;
}

inline GnnModel model_from_json(const nlohmann::json& j) {
    GnnModel model;
    try {
        const auto& c = j.at("config");
        model.cfg.in_dim = c.at("in_dim").get<Eigen::Index>();
        model.cfg.hidden = c.at("hidden").get<int>();
        model.cfg.heads = c.at("heads").get<int>();
        model.cfg.pool_ratio = c.at("pool_ratio").get<double>();
        model.cfg.classes = c.at("classes").get<int>();
        model.class_names = j.at("classes").get<std::vector<std::string>>();
        model.train_cfg = train_config_from_json(j.at("train_config"));
        model.params.cfg = model.cfg;
        model.params.gat1.resize(static_cast<std::size_t>(model.cfg.heads));
        model.params.gat2.resize(static_cast<std::size_t>(model.cfg.heads));
        const auto& tensors = j.at("tensors");
        model.params.for_each_tensor([&](const std::string& name, MatX<double>& t) {
            t = detail::tensor_from_json(tensors.at(name));
        });
    } catch (const nlohmann::json::exception& ex) {
        throw ValidationError(std::string("malformed model JSON: ") + ex.what());
    }
    const Eigen::Index w = model.cfg.width();
    bool shapes_ok = !model.params.gat1.empty() && model.params.gat1.front().W.rows() == model.cfg.in_dim &&
                     model.params.gat1.front().W.cols() == model.cfg.hidden && model.params.skip1.cols() == w &&
                     model.params.pool_p.rows() == w && model.params.v2_Wl.rows() == w &&
                     model.params.head_W.rows() == w && model.params.head_b.rows() == model.cfg.classes;
    model.params.for_each_tensor([&](const std::string&, const MatX<double>& t) {
        if (!t.allFinite()) shapes_ok = false;
    });
    if (!shapes_ok) throw ValidationError("model tensors do not match the declared configuration");
    return model;
}

inline std::string history_to_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,train_loss,test_loss,train_acc,test_acc\n";
    for (std::size_t e = 0; e < history.size(); ++e) {
        out += std::to_string(e) + ',' + csv::format_value(history[e].train_loss) + ',' +
               csv::format_value(history[e].test_loss) + ',' + csv::format_value(history[e].train_acc) + ',' +
               csv::format_value(history[e].test_acc) + '\n';
    }
    return out;
}

}  // namespace causalfp::gnn
