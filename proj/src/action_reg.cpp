#include "ernie/action_reg.hpp"

#include <algorithm>

#include "ernie/errors.hpp"

namespace ernie::action {

Mode mode_from_string(const std::string& s) {
    if (s == "greedy") return Mode::greedy;
    if (s == "brute") return Mode::brute;
    throw ParameterError("unknown action attack mode: " + s);
}

std::string to_string(Mode m) { return m == Mode::greedy ? "greedy" : "brute"; }

namespace {

void check_joint(const std::vector<int>& n_actions, const JointAction& a) {
    if (a.size() != n_actions.size()) throw ShapeError("joint action arity does not match the agent count");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] < 0 || a[i] >= n_actions[i]) throw DomainError("joint action index out of range");
}

std::vector<int> changed(const JointAction& a, const JointAction& b) {
    std::vector<int> out;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) out.push_back(static_cast<int>(i));
    return out;
}

} // namespace

ActionAttackResult greedy_action_attack(const QFunction& q, const std::vector<int>& n_actions, const JointAction& a,
                                        int k, const GreedyOptions& opts) {
    check_joint(n_actions, a);
    if (k < 0) throw ParameterError("greedy_action_attack: K must be >= 0");
    ActionAttackResult out;
    out.perturbed = a;
    const int n = static_cast<int>(a.size());
    if (k > n) {
        out.warnings.push_back("K=" + std::to_string(k) + " exceeds the agent count; clamped to " + std::to_string(n));
        k = n;
    }
    if (k == 0) return out;

    const double q_orig = q(a);
    ++out.evaluations;

    JointAction current = a;
    std::vector<bool> used(n, false);
    bool have_best = false;
    for (int round = 0; round < k; ++round) {
        const JointAction base = opts.restart_each_round ? a : current;
        int best_agent = -1, best_action = -1;
        double best_value = -1.0;
        for (int i = 0; i < n; ++i) {
            if (used[i]) continue;
            for (int act = 0; act < n_actions[i]; ++act) {
                if (act == a[i]) continue;
                JointAction cand = base;
                cand[i] = act;
                double diff = q_orig - q(cand);
                ++out.evaluations;
                double value = diff * diff;
                if (value > best_value) {
                    best_value = value;
                    best_agent = i;
                    best_action = act;
                }
            }
        }
        if (best_agent < 0) break;
        used[best_agent] = true;
        JointAction committed = base;
        committed[best_agent] = best_action;
        if (!opts.restart_each_round) current = committed;
        if (!have_best || best_value > out.value) {
            have_best = true;
            out.value = best_value;
            out.perturbed = committed;
        }
    }
    out.changed_agents = changed(a, out.perturbed);
    return out;
}

ActionAttackResult brute_force_action_attack(const QFunction& q, const std::vector<int>& n_actions,
                                             const JointAction& a, int k) {
    check_joint(n_actions, a);
    const int n = static_cast<int>(a.size());
    if (n > 6 || *std::max_element(n_actions.begin(), n_actions.end()) > 6)
        throw SizeError("brute_force_action_attack: instance too large (N <= 6, |A| <= 6)");
    if (k < 0) throw ParameterError("brute_force_action_attack: K must be >= 0");
    ActionAttackResult out;
    out.perturbed = a;
    if (k > n) {
        out.warnings.push_back("K=" + std::to_string(k) + " exceeds the agent count; clamped to " + std::to_string(n));
        k = n;
    }
    if (k == 0) return out;
    const double q_orig = q(a);
    ++out.evaluations;
    bool have_best = false;

    // Subsets in increasing size, each in lexicographic order; for every subset all
    // assignments of alternative actions in odometer order (first agent slowest).
    for (int size = 1; size <= k; ++size) {
        std::vector<int> subset(size);
        for (int i = 0; i < size; ++i) subset[i] = i;
        while (true) {
            bool feasible = true;
            for (int agent : subset)
                if (n_actions[agent] < 2) feasible = false;
            std::vector<int> choice(size, 0);
            auto alt = [&](int slot) {
                int agent = subset[slot];
                return choice[slot] < a[agent] ? choice[slot] : choice[slot] + 1;
            };
            while (feasible) {
                JointAction cand = a;
                for (int s = 0; s < size; ++s) cand[subset[s]] = alt(s);
                double diff = q_orig - q(cand);
                ++out.evaluations;
                double value = diff * diff;
                if (!have_best || value > out.value) {
                    have_best = true;
                    out.value = value;
                    out.perturbed = cand;
                }
                int slot = size - 1;
                while (slot >= 0) {
                    if (++choice[slot] < n_actions[subset[slot]] - 1) break;
                    choice[slot] = 0;
                    --slot;
                }
                if (slot < 0) break;
            }
            int pos = size - 1;
            while (pos >= 0 && subset[pos] == n - size + pos) --pos;
            if (pos < 0) break;
            ++subset[pos];
            for (int i = pos + 1; i < size; ++i) subset[i] = subset[i - 1] + 1;
        }
    }
    out.changed_agents = changed(a, out.perturbed);
    return out;
}

double action_regularizer(const QFunction& q, const std::vector<int>& n_actions, const JointAction& a, int k, Mode mode) {
    if (k == 0) {
        check_joint(n_actions, a);
        return 0.0;
    }
    return mode == Mode::greedy ? greedy_action_attack(q, n_actions, a, k).value
                                : brute_force_action_attack(q, n_actions, a, k).value;
}

JointAction worst_single_flip(const QFunction& q, const std::vector<int>& n_actions, const JointAction& a, int agent) {
    check_joint(n_actions, a);
    if (agent < 0 || agent >= static_cast<int>(a.size())) throw ParameterError("worst_single_flip: agent out of range");
    JointAction best = a;
    double best_q = q(a);
    for (int act = 0; act < n_actions[agent]; ++act) {
        if (act == a[agent]) continue;
        JointAction cand = a;
        cand[agent] = act;
        double v = q(cand);
        if (v < best_q) {
            best_q = v;
            best = cand;
        }
    }
    return best;
}

} // namespace ernie::action
