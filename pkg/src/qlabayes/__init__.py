"""Adaptive Bayes-type and quasi-maximum likelihood estimation for ergodic diffusions."""
