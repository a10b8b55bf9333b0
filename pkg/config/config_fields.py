# config/config_fields.py
# 该文件用于定义信号、状态和故障的规范名称 (CSV 列名与接线文件中使用的名字)

TIME_COLUMN = "t"

## 可测信号 (Available signals)
SIGNALS = {
    "y_p_tp": "Pressure before the pump filter (kPa)",
    "y_p_ap": "Pressure after the pump filter (kPa)",
    "y_p_du": "Pressure inside the dosing unit (kPa)",
    "n_p": "Pump speed (rpm)",
    "DC": "Duty cycle of the dosing unit (fraction 0-1)",
}
SIGNAL_NAMES = tuple(SIGNALS)
PRESSURE_SIGNALS = ("y_p_tp", "y_p_ap", "y_p_du")

## 物理状态 (PlantState 顺序)
STATES = ("p_bp", "p_ap", "p_du")

# 每个状态用哪个测量信号做归一化
STATE_MEASUREMENTS = {
    "p_bp": "y_p_tp",
    "p_ap": "y_p_ap",
    "p_du": "y_p_du",
}

## 故障集合
FAULTS = {
    "none": "Nominal operation",
    "f_A_du": "Clogging before the dosing unit",
    "f_A_ori": "Clogging after the dosing unit (return orifice)",
    "f_A_p": "Clogging after the pump (pressure-relief return line)",
    "f_A_dose": "Clogging of the dosing nozzle",
    "f_y_ap": "Additive offset on the y_p_ap sensor (kPa)",
    "f_p_du": "Additive offset on the y_p_du sensor (kPa)",
}
CLOGGING_FAULTS = ("f_A_du", "f_A_ori", "f_A_p", "f_A_dose")
SENSOR_FAULTS = {"f_y_ap": "y_p_ap", "f_p_du": "y_p_du"}

## 残差与求解器
RESIDUALS = ("r1", "r2", "r3")
SOLVERS = ("ef", "mp", "rk4")
