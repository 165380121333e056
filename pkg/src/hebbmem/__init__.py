"""Memory-based Hebbian parameter adaptation."""
