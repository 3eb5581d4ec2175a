"""Same task, four sources of constraints.

The wet-floor task asks the robot to walk onto a wet floor. A purely
geometric map sees nothing taller than a step there, so it lets the robot
through; the contextual pipeline detects the sign a few seconds out and the
filter holds the robot back.

    python demos/episode_comparison.py
"""

from ctxsafe.sim import MODES, EpisodeConfig, format_table, run_episode, summarize

for scenario in ("wet_floor_sign", "open_warehouse"):
    print(f"== {scenario}")
    for mode in MODES:
        log, m = run_episode(EpisodeConfig(scenario, mode, seed=7))
        if m.violation:
            what = f"violation at t={log.violation_time:.1f}s, blamed on {m.failure_attribution}"
        else:
            what = "goal reached" if m.goal_reached else "held short of the goal"
        print(f"  {mode:<10} {what:<40} min h {m.min_h:+.2f} m, {m.interventions} filter interventions")

# A small suite over one scenario shows how the table is built.
metrics = [run_episode(EpisodeConfig("cones_line", "core", seed=s))[1] for s in range(3)]
print()
print(format_table([summarize(metrics, "core")]), end="")
