import time
import numpy as np
from emai import envs, evaluation, explain, masking, rollout, target
from emai.rng import episode_seed

kc = envs.make_env("keycorridor")
weak_pol = target.ScriptedKeyCorridor(weakened=True)
KC_CFG = {"steps": 40_000, "lambda": 0.0, "baseline_episodes": 300,
          "epsilon_anneal_steps": 20_000}
mp, _ = masking.train_emai(weak_pol, kc, KC_CFG, seed=7)
print("trained, j_pi=%.3f" % mp.j_pi, flush=True)

# who does weak-EMAI call critical in weak episodes (pre-switch)?
crit_counts = np.zeros(3)
weak_eps = 0
for i in range(100):
    seed = episode_seed(99, "diag", i)
    kc.reset(seed)
    if kc.positions[0] not in ((4, 0), (4, 1)):
        continue
    weak_eps += 1
    tr = rollout.run_target_episode(kc, seed, weak_pol)
    for s in tr.steps:
        if s.state[6] < 0:
            crit_counts[np.argmax(mp.importance_vector(s.observations))] += 1
print("weak-episode pre-switch critical counts:", crit_counts, "eps:", weak_eps, flush=True)

# package inspection + distances from weak states
ex = explain.EmaiExplainer(mp)
for quantile in (0.1, 0.3):
    pkg = evaluation.build_patch_package(ex, weak_pol, kc, harvest_episodes=100,
                                         quantile=quantile, seed=41)
    closed = pkg.obs[pkg.obs[:, 2] < 0]
    print(f"q={quantile}: entries={len(pkg)} closed-door entries={len(closed)}", flush=True)
    # min distances from weak-episode agent-0 pre-switch obs
    dists = []
    for i in range(40):
        seed = episode_seed(99, "diag", i)
        kc.reset(seed)
        if kc.positions[0] not in ((4, 0), (4, 1)):
            continue
        tr = rollout.run_target_episode(kc, seed, weak_pol)
        for s in tr.steps:
            if s.state[6] < 0:
                d = np.abs(pkg.obs - s.observations[0]).sum(axis=1).min()
                dists.append(d)
    print("  weak agent-0 pre-switch min-dist: median=%.2f p25=%.2f p10=%.2f" % (
        np.median(dists), np.percentile(dists, 25), np.percentile(dists, 10)), flush=True)
    for d_th in (1.2, 1.6, 2.0):
        rep_e = evaluation.apply_patch(pkg, ex, weak_pol, kc, d_th=d_th,
                                       episodes=200, seed=43)
        rep_r = evaluation.apply_patch(pkg if False else
                                       evaluation.build_patch_package(
                                           explain.RandomExplainer(seed=17), weak_pol, kc,
                                           harvest_episodes=100, quantile=quantile, seed=41),
                                       explain.RandomExplainer(seed=17), weak_pol, kc,
                                       d_th=d_th, episodes=200, seed=43)
        print(f"  d_th={d_th}: emai delta={rep_e.delta:.3f}+-{rep_e.stderr:.3f} ov={rep_e.mean_overrides:.2f} | "
              f"random delta={rep_r.delta:.3f}+-{rep_r.stderr:.3f} ov={rep_r.mean_overrides:.2f}", flush=True)
