import time
import numpy as np
from emai import envs, masking, rollout, target
from emai.rng import episode_seed

kc = envs.make_env("keycorridor")
pol = target.scripted_policy(kc)

def rate(mp, n=200):
    top0 = total = 0
    for i in range(n):
        tr = rollout.masked_episode(kc, episode_seed(7, "crit6", i), pol,
                                    lambda t, o, s: mp.greedy_mask_bits(o),
                                    np.random.default_rng(i))
        for s in tr.steps:
            if s.state[6] < 0:
                total += 1
                top0 += int(np.argmax(mp.importance_vector(s.observations)) == 0)
    return top0 / max(1, total), total

for beta in (None, 0.03):
    for steps in (40_000, 60_000):
        for seed in (7, 11, 19):
            t0 = time.time()
            cfg = {"steps": steps, "lambda": 0.0, "baseline_episodes": 200,
                   "epsilon_anneal_steps": steps // 2, "beta": beta}
            mp, _ = masking.train_emai(pol, kc, cfg, seed=seed)
            r, total = rate(mp)
            print(f"beta={beta} steps={steps} seed={seed}: rate={r:.3f} "
                  f"(n={total}) {time.time()-t0:.0f}s", flush=True)
