# LaneTopoLab Test Suite
