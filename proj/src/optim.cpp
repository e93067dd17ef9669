#include "calcseg/optim.hpp"

#include "calcseg/errors.hpp"

namespace calcseg {

NamedParams named_params(const torch::nn::Module& module, const std::string& prefix) {
    NamedParams out;
    for (const auto& item : module.named_parameters()) out.emplace_back(prefix + item.key(), item.value());
    return out;
}

GroupedAdamW::GroupedAdamW(const std::vector<ParamGroupSpec>& groups, double weight_decay,
                           std::pair<double, double> betas) {
    std::vector<torch::optim::OptimizerParamGroup> torch_groups;
    for (const auto& g : groups) {
        std::vector<torch::Tensor> decay;
        std::vector<torch::Tensor> no_decay;
        for (const auto& [name, p] : g.params) {
            (p.dim() >= 2 ? decay : no_decay).push_back(p);
        }
        for (const auto& [name, p] : g.params) {
            if (p.dim() >= 2) ordered_.emplace_back(name, p);
        }
        for (const auto& [name, p] : g.params) {
            if (p.dim() < 2) ordered_.emplace_back(name, p);
        }
        auto opts = [&](double wd) {
            return std::make_unique<torch::optim::AdamWOptions>(
                torch::optim::AdamWOptions(1e-3).weight_decay(wd).betas({betas.first, betas.second}));
        };
        if (!decay.empty()) {
            torch_groups.emplace_back(decay, opts(weight_decay));
            multipliers_.push_back(g.lr_multiplier);
        }
        if (!no_decay.empty()) {
            torch_groups.emplace_back(no_decay, opts(0.0));
            multipliers_.push_back(g.lr_multiplier);
        }
    }
    opt_ = std::make_unique<torch::optim::AdamW>(torch_groups, torch::optim::AdamWOptions(1e-3));
}

void GroupedAdamW::set_lr(double base_lr) {
    auto& groups = opt_->param_groups();
    for (size_t i = 0; i < groups.size(); ++i) {
        static_cast<torch::optim::AdamWOptions&>(groups[i].options()).lr(base_lr * multipliers_[i]);
    }
}

TensorMap GroupedAdamW::export_state() const {
    TensorMap out;
    auto& state = opt_->state();
    for (const auto& [name, p] : ordered_) {
        auto it = state.find(p.unsafeGetTensorImpl());
        if (it == state.end()) continue;
        const auto& st = static_cast<const torch::optim::AdamWParamState&>(*it->second);
        out.emplace(name + "/step", torch::tensor(st.step(), torch::kInt64));
        out.emplace(name + "/exp_avg", st.exp_avg().clone());
        out.emplace(name + "/exp_avg_sq", st.exp_avg_sq().clone());
    }
    return out;
}

void GroupedAdamW::import_state(const TensorMap& saved) {
    auto& state = opt_->state();
    for (const auto& [name, p] : ordered_) {
        auto step = saved.find(name + "/step");
        if (step == saved.end()) continue;
        auto avg = saved.find(name + "/exp_avg");
        auto sq = saved.find(name + "/exp_avg_sq");
        if (avg == saved.end() || sq == saved.end()) {
            throw ShapeError("optimizer state for '" + name + "' is incomplete");
        }
        auto st = std::make_unique<torch::optim::AdamWParamState>();
        st->step(step->second.item<int64_t>());
        st->exp_avg(avg->second.clone().to(p.dtype()));
        st->exp_avg_sq(sq->second.clone().to(p.dtype()));
        state[p.unsafeGetTensorImpl()] = std::move(st);
    }
}

}  // namespace calcseg
