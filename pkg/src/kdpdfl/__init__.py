"""Personalized decentralized federated learning with distillation-based peer similarity."""
