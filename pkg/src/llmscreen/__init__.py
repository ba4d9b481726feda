"""Zero-shot LLM abstract screening for systematic reviews, with evaluation
of single screeners and series/parallel ensembles against inclusion lists."""

__version__ = "0.1.0"
