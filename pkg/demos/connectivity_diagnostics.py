"""
Measuring mobility-based identification
=======================================

How well the data can separate teacher effects from student effects is a
property of the bipartite matching graph, not of the outcomes. With too few
movers the graph falls apart entirely; with barely enough it is connected
but ill-conditioned, which is the regime where least squares breaks down.
The smallest nonzero eigenvalue of the projected teacher-graph Laplacian
quantifies the conditioning. This script sweeps the mobility rate and
watches the diagnostics move through both regimes.
"""

from twoway_eb import DesignParams, build_graph, connectivity_report, generate_design

for pi_mob in (0.03, 0.06, 0.12, 0.30):
    params = DesignParams(r=400, c=40, s=4, T=2, pi_mob=pi_mob)
    _, panel = generate_design(params, seed=3)
    graph = build_graph(panel)
    report = connectivity_report(graph)

    print(f"pi_mob = {pi_mob:.2f}")
    if report.num_components > 1:
        # Disconnected: effects are only identified within a component, so
        # the eigenvalue section is skipped. The estimators refuse this
        # graph; extract_largest_component is the standard remedy.
        print(f"  {report.num_components} components, "
              f"sizes {report.component_sizes}: {report.note}")
    else:
        # Connected: rho_proj is the smallest nonzero eigenvalue of the
        # projected Laplacian, rho_norm_proj its degree-normalized version
        # (scale-free in class size, comparable across designs).
        print(f"  connected; rho_proj = {report.rho_proj[0]:.4f}, "
              f"normalized {report.rho_norm_proj[0]:.4f}")

print()
print("Reading: below ~10% mobility this design shatters. Just past the")
print("connectivity threshold the normalized eigenvalue sits near 0.03, the")
print("limited-mobility regime where shrinkage pays the most; at 30%")
print("mobility it is five times larger and least squares becomes usable.")
