#pragma once

#include <string>
#include <unordered_map>

#include "csadapt/params.hpp"
#include "csadapt/tape.hpp"

namespace csadapt {

// One forward(+backward) pass: a tape plus leaf nodes for the parameters it
// touches. Both decoder paths of a dual forward fetch the same leaf from the
// cache, so shared frozen weights are literally the same node.
struct Session {
    Tape tape;
    ParamStore* params = nullptr;
    FreezePolicy policy;
    bool train_mode = false;

    Session(ParamStore& store, FreezePolicy pol, bool train)
        : tape(train), params(&store), policy(pol), train_mode(train) {}

    // Inference-only session: no closures, nothing trainable.
    explicit Session(ParamStore& store)
        : tape(false), params(&store), policy{TrainStage::adapt}, train_mode(false) {}

    Var p(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        bool rg = train_mode && policy.trainable(name);
        Var v = tape.leaf(params->at(name), rg);
        cache_.emplace(name, v);
        return v;
    }

    // Gradient of the named parameter after backward (zero if untouched).
    const Mat& param_grad(const std::string& name) {
        auto it = cache_.find(name);
        if (it == cache_.end()) throw InternalError("parameter not used in this session: " + name);
        return tape.grad(it->second);
    }

    bool used(const std::string& name) const { return cache_.count(name) != 0; }

private:
    std::unordered_map<std::string, Var> cache_;
};

}  // namespace csadapt
