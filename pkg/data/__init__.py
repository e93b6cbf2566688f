# Data Package
