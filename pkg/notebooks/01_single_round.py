# %% [markdown]
# # One market hour, end to end
#
# We simulate an hour of motorway traffic, turn every vehicle's velocity
# trace into an energy figure, and let the grid decide how much surplus to
# buy from the vehicles that have some.

# %%
import numpy as np

from evgrid import harness
from evgrid.mobility import CLASSES

config = harness.ScenarioConfig()
state = harness.simulate_fleet(config, seed=7)
print(f"{state.n} vehicles, mean speed {state.mean_speed_m_s:.1f} m/s")

# %% [markdown]
# Each vehicle ends up either short of charge (demand), comfortably above
# its upper threshold (surplus) or in between.

# %%
for k, cls in enumerate(CLASSES):
    sel = state.classes == k
    print(f"{cls.value:6s} n={sel.sum():4d}  demand {state.demand_Wh[sel].sum() / 1e3:9.1f} kWh"
          f"  surplus {state.supply_Wh[sel].sum() / 1e3:8.1f} kWh")

# %% [markdown]
# The market step filters offers through the participation game, solves the
# dispatch by branch and bound and compares against two baselines.

# %%
report = harness.solve_round(config, state, config.grid)
print(f"viable offers      {report.n_viable}")
print(f"accepted from EVs  {report.accepted_Wh / 1e3:.1f} kWh ({report.accepted_fraction:.1%} of viable)")
print(f"grid dispatch      {report.solution.s_G_Wh / 1e6:.2f} MWh (cap {report.s_G_cap / 1e6:.0f} MWh)")
print(f"cost with EVs      {report.solution.cost_C_G:.0f}")
print(f"cost grid only     {report.grid_only_cost:.0f}")
print(f"cost at fixed cap  {report.no_opt_cost:.0f}")
print(f"messages           {report.message_count}")

# %% [markdown]
# Net-zero check: generation plus accepted surplus covers demand plus losses.

# %%
print(f"residual {report.net_zero_residual_Wh:.3e} Wh")
assert np.isfinite(report.net_zero_residual_Wh)
