#pragma once

#include <string>
#include <vector>

#include "damp/matrix.hpp"
#include "damp/tape.hpp"

namespace damp {

// Named reference to one trainable tensor. The optimizer operates on exactly
// the tensors collected into a ParamSet and nothing else.
struct ParamRef {
    std::string name;
    Matrix* value = nullptr;
};

using ParamSet = std::vector<ParamRef>;

inline size_t total_elements(const ParamSet& params) {
    size_t n = 0;
    for (const auto& p : params) n += p.value->size();
    return n;
}

// Records which tape var each bound parameter landed on, so gradients can be
// read back after backward().
struct TapeBinding {
    const Matrix* param = nullptr;
    Var var;
};

class Binder {
public:
    Binder(Tape& t, std::vector<TapeBinding>* track = nullptr) : tape_(t), track_(track) {}

    Var operator()(const Matrix& m) {
        Var v = tape_.leaf(m);
        if (track_) track_->push_back(TapeBinding{&m, v});
        return v;
    }

private:
    Tape& tape_;
    std::vector<TapeBinding>* track_;
};

}  // namespace damp
