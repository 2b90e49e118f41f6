"""Pedestrian-count forecasting with diffusion-convolutional recurrent networks.

Pipeline: hourly counts -> cleaned panel (anomalous weeks removed) ->
sensor graph (geography plus DTW similarity) -> seq2seq forecaster.
"""

__version__ = "0.1.0"
