"""Entity typing in product titles as textual entailment with tuned continuous prompts."""

__version__ = "0.1.0"
