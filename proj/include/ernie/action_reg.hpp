#pragma once

#include <functional>
#include <string>
#include <vector>

namespace ernie::action {

/// Per-agent discrete action indices.
using JointAction = std::vector<int>;

/// Global Q at a fixed state, as a function of the joint action.
using QFunction = std::function<double(const JointAction&)>;

enum class Mode { greedy, brute };
Mode mode_from_string(const std::string& s);
std::string to_string(Mode m);

struct ActionAttackResult {
    JointAction perturbed;
    double value = 0.0;                 // (Q(s,a) - Q(s,a'))^2
    std::vector<int> changed_agents;    // agents whose action differs in `perturbed`
    long evaluations = 0;               // calls to the Q function
    std::vector<std::string> warnings;  // e.g. budget clamped to the agent count
};

struct GreedyOptions {
    /// Re-scan from the original joint action every round instead of accumulating flips.
    bool restart_each_round = false;
};

/// K rounds; each round commits the single-agent flip (among agents not yet changed)
/// that maximises |Q(a) - Q(a')|^2. Reports the best committed prefix. Ties go to the
/// lowest agent index, then the lowest action index.
ActionAttackResult greedy_action_attack(const QFunction& q, const std::vector<int>& n_actions, const JointAction& a,
                                        int k, const GreedyOptions& opts = {});

/// Exact maximiser over all a' with Hamming(a, a') <= K. Limited to N <= 6 agents and
/// at most 6 actions per agent.
ActionAttackResult brute_force_action_attack(const QFunction& q, const std::vector<int>& n_actions,
                                             const JointAction& a, int k);

double action_regularizer(const QFunction& q, const std::vector<int>& n_actions, const JointAction& a, int k, Mode mode);

/// Joint action with agent `agent`'s action minimising q (keeps the current action on ties,
/// then the lowest index).
JointAction worst_single_flip(const QFunction& q, const std::vector<int>& n_actions, const JointAction& a, int agent);

} // namespace ernie::action
