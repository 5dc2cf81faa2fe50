"""Distributed multiclass logistic regression via sufficient-vector broadcasting."""
