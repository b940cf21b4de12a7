import numpy as np
from emai import envs, evaluation, explain, masking, rollout, target
from emai.rng import episode_seed

kc = envs.make_env("keycorridor")
weak_pol = target.ScriptedKeyCorridor(weakened=True)

# weak-vs-strong returns per start
from collections import defaultdict
by_start = defaultdict(list)
for i in range(200):
    kc.reset(i)
    s0 = kc.positions[0]
    by_start[s0].append(rollout.run_target_episode(kc, i, weak_pol).episode_reward)
for k in sorted(by_start):
    print("start", k, "mean=%.2f n=%d" % (np.mean(by_start[k]), len(by_start[k])), flush=True)

KC_CFG = {"steps": 40_000, "lambda": 0.0, "baseline_episodes": 300,
          "epsilon_anneal_steps": 20_000}
mp, _ = masking.train_emai(weak_pol, kc, KC_CFG, seed=7)
print("trained, j_pi=%.3f beta=%.5f" % (mp.j_pi, mp.beta), flush=True)

crit_counts = np.zeros(3)
for i in range(100):
    seed = episode_seed(99, "diag", i)
    kc.reset(seed)
    if kc.positions[0] not in ((4, 0), (4, 1)):
        continue
    tr = rollout.run_target_episode(kc, seed, weak_pol)
    for s in tr.steps:
        if s.state[6] < 0:
            crit_counts[np.argmax(mp.importance_vector(s.observations))] += 1
print("weak-episode pre-switch critical counts:", crit_counts, flush=True)

ex = explain.EmaiExplainer(mp)
rnd = explain.RandomExplainer(seed=17)
for quantile in (0.1, 0.3):
    for d_th in (1.0, 1.3, 1.6):
        pkg_e = evaluation.build_patch_package(ex, weak_pol, kc, 100, quantile, seed=41)
        rep_e = evaluation.apply_patch(pkg_e, ex, weak_pol, kc, d_th=d_th, episodes=300, seed=43)
        pkg_r = evaluation.build_patch_package(rnd, weak_pol, kc, 100, quantile, seed=41)
        rep_r = evaluation.apply_patch(pkg_r, rnd, weak_pol, kc, d_th=d_th, episodes=300, seed=43)
        se = np.sqrt(rep_e.stderr**2 + rep_r.stderr**2)
        print(f"q={quantile} d_th={d_th}: emai={rep_e.delta:.3f}+-{rep_e.stderr:.3f} ov={rep_e.mean_overrides:.2f} "
              f"| random={rep_r.delta:.3f}+-{rep_r.stderr:.3f} ov={rep_r.mean_overrides:.2f} "
              f"| margin={(rep_e.delta-rep_r.delta):.3f} needed={2*se:.3f}", flush=True)
