"""Cross-domain retrieval under unseen classes and unseen domains."""
