"""Extraction side of the pipeline: wraps the detection and text encoders plus
the attribute-generation LLM, and emits the binary tensor manifests the main
package consumes."""

__version__ = "0.1.0"
