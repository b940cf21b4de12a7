"""Agent-level importance explanations for multi-agent RL.

Learns per-agent masking policies that decide, per time-step, whether a
target agent's action can be randomized without hurting the team return;
the learned keep-vs-mask value gap is the agent's importance. Ships the
environments, training machinery, baseline explainers and the evaluation
harness (fidelity, attacks, patching) needed to validate the approach at
desk scale.
"""

__version__ = "0.1.0"
