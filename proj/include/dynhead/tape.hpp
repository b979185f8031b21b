#pragma once

#include <functional>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dynhead/tensor.hpp"

namespace dynhead {

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// Each record holds the operation's input/output tensors and a closure that
/// propagates the output gradient to the input gradients. Records are appended
/// in execution order, so inputs of a record were always produced earlier; a
/// backward pass is one reverse sweep that invokes every closure exactly once.
class Tape {
public:
    struct Record {
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> backward;
    };

    void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
        records_.push_back(Record{std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }

    /// Number of backward closures invoked by the last backward() call.
    std::size_t last_backward_visits() const { return last_visits_; }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, accumulating
    /// gradients into every tensor touched by recorded operations. The loss
    /// must be a scalar produced by an operation on this tape.
    void backward(const Tensor& loss) {
        if (!loss || loss.shape() != Shape{1, 1, 1, 1})
            throw std::invalid_argument("backward: loss must be a 1x1x1x1 scalar tensor");
        bool on_tape = false;
        for (const Record& r : records_) {
            if (r.output.same_storage(loss)) {
                on_tape = true;
                break;
            }
        }
        if (!on_tape)
            throw std::invalid_argument("backward: loss tensor was not produced by this tape");

        zero_all_grads();
        Tensor seed = loss;
        seed.grad()[0] = 1.0;

        last_visits_ = 0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            it->backward();
            ++last_visits_;
        }
    }

    /// Checks the topological-order invariant: every input of a record is
    /// either a leaf or the output of an earlier record.
    bool validate_order() const {
        std::unordered_set<const void*> produced;
        std::unordered_set<const void*> produced_later;
        for (const Record& r : records_) produced_later.insert(r.output.id());
        for (const Record& r : records_) {
            produced_later.erase(r.output.id());
            for (const Tensor& in : r.inputs) {
                if (!produced.count(in.id()) && produced_later.count(in.id())) return false;
            }
            produced.insert(r.output.id());
        }
        return true;
    }

private:
    void zero_all_grads() {
        std::unordered_set<const void*> seen;
        for (Record& r : records_) {
            for (Tensor& t : r.inputs)
                if (seen.insert(t.id()).second) t.zero_grad();
            if (seen.insert(r.output.id()).second) r.output.zero_grad();
        }
    }

    std::vector<Record> records_;
    std::size_t last_visits_ = 0;
};

} // namespace dynhead
