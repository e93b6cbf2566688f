# Camera Feature Fusion
# Selective camera-to-BEV projection engine
