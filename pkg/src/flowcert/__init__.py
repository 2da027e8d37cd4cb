"""flowcert: stable polynomial dynamical systems with barrier certificates.

Learns a polynomial vector field from demonstration trajectories together
with a Lyapunov function certifying global asymptotic stability and,
optionally, a barrier certificate guaranteeing static obstacle avoidance.
All certificates are synthesized by sum-of-squares programming and can be
re-verified and falsification-tested after the fact.
"""

__version__ = "0.1.0"
