"""Modular safe skill learning for a stirring task: simulator, risk monitors,
DDPG skills and a priority arbiter."""

__version__ = "0.1.0"
